"""Shared fixtures.

The desk-scale experiment (corpus, pretraining, adapter fine-tuning,
controls) takes many minutes, so it runs once per session and the
acceptance tests share its evidence dict.
"""

import pytest


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    from desk import run_desk_experiment

    out_dir = tmp_path_factory.mktemp("desk_a")
    result = run_desk_experiment(str(out_dir), with_sft=True)
    result["out_dir"] = str(out_dir)
    return result

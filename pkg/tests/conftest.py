import pytest

from rheovision import synthgen


@pytest.fixture(scope="session")
def mini_campaign_dir(tmp_path_factory):
    """A small but complete campaign shared by pipeline-level tests.

    30 frames per run leaves 9 input sets per run after the skip rule; 26px
    frames keep optical flow cheap; 12 concretes with 5 recycled satisfy the
    fold constraints the same way the desk preset does.
    """
    spec = synthgen.CampaignSpec(n_concretes=12, runs_per_concrete=2, frames_per_run=30,
                                 image_size=(26, 26), seed=21, recycled_fraction=5 / 12)
    out = tmp_path_factory.mktemp("campaign") / "data"
    synthgen.generate_campaign(spec, out)
    return out, spec

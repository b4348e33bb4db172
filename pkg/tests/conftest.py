import pytest

from dcrgan import pipeline as pl

# small enough that a full MN -> SRN -> GAN -> eval run takes about a second
TINY = dict(synth_num_seen=4, synth_num_unseen=2, synth_instances=12, synth_d_v=6, synth_d_a=3,
            rep_dim=4, mn_hidden=8, srn_hidden=8, g_hidden=8, d_hidden=8, f_hidden=4, d_z=2,
            n_m=2, n_r=3, n_loop=3, n_d=2, batch_mn=8, batch_gan=8, synth_per_class=10,
            head_steps=20, lr=1e-3)


def tiny_flags():
    return [f"--{k.replace('_', '-')}={v}" for k, v in TINY.items()]


@pytest.fixture
def tiny_cfg(tmp_path):
    return pl.RunConfig(seed=0, out_dir=str(tmp_path / "run"), **TINY).validate()

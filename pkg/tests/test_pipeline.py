import csv
import math
import shutil
from pathlib import Path

import numpy as np
import pytest

from dcrgan import evaluate as ev
from dcrgan import pipeline as pl


class TestConfig:
    def test_seed_mandatory(self):
        with pytest.raises(pl.ConfigError, match="seed"):
            pl.RunConfig().validate()

    @pytest.mark.parametrize("field,value", [("lr", 0.0), ("beta1", 1.0), ("slope", 1.5),
                                             ("variant", "D"), ("synth_overlap", 2.0), ("omega1", -1.0)])
    def test_rejects_bad_values(self, field, value):
        with pytest.raises(pl.ConfigError):
            pl.RunConfig(seed=0, **{field: value}).validate()

    def test_precedence_flags_over_file_over_defaults(self, tmp_path):
        f = tmp_path / "c.txt"
        f.write_text("# comment\nseed=4\nrep_dim=16\nlambda1=0.5\nomega2=auto\nnormalize=true\n")
        cfg = pl.RunConfig.from_file(f, {"rep_dim": 32})
        assert (cfg.seed, cfg.rep_dim, cfg.lambda1, cfg.omega2, cfg.normalize) == (4, 32, 0.5, None, True)
        assert cfg.margin == 1.0

    def test_unknown_key_and_bad_value(self, tmp_path):
        f = tmp_path / "c.txt"
        f.write_text("bogus=1\n")
        with pytest.raises(pl.ConfigError, match="bogus"):
            pl.RunConfig.from_file(f)
        with pytest.raises(pl.ConfigError, match="rep_dim"):
            pl.RunConfig.parse_value("rep_dim", "many")

    def test_text_round_trip(self, tmp_path):
        cfg = pl.RunConfig(seed=3, omega1=0.5, normalize=True)
        (tmp_path / "c").write_text(cfg.to_text())
        assert pl.RunConfig.from_file(tmp_path / "c") == cfg

    def test_stage_keys_chain(self):
        base = pl.RunConfig(seed=0)
        keys = lambda c: [c.stage_key(s, "fp") for s in ("mn", "srn", "gan")]
        k0 = keys(base)
        k_gan = keys(base.replace(n_loop=7))
        k_mn = keys(base.replace(margin=2.0))
        assert k_gan[:2] == k0[:2] and k_gan[2] != k0[2]
        assert all(a != b for a, b in zip(k_mn, k0))
        assert keys(base.replace(variant="C1"))[2] == k0[2]
        assert keys(base.replace(variant="A"))[2] != k0[2]


class TestStages:
    def test_gan_refuses_without_frozen_checkpoints(self, tiny_cfg):
        ds = pl.load_dataset(tiny_cfg)
        with pytest.raises(pl.StageError, match="stage gan.*metric-network"):
            pl.gan_stage(tiny_cfg, ds)
        pl.mn_stage(tiny_cfg, ds)
        with pytest.raises(pl.StageError, match="rectifier"):
            pl.gan_stage(tiny_cfg, ds)

    def test_train_writes_checkpoints_and_log(self, tiny_cfg):
        run = pl.train_run(tiny_cfg)
        names = sorted(p.name for p in run.stage_dirs["gan"].glob("*.ckpt"))
        assert names == ["D.ckpt", "F1.ckpt", "F2.ckpt", "G.ckpt"]
        with (Path(tiny_cfg.out_dir) / "train_log.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        n_mn = tiny_cfg.n_m * math.ceil(run.ds.train_idx.size / tiny_cfg.batch_mn)
        n_srn = tiny_cfg.n_r * run.ds.seen_classes.size
        counts = {s: sum(r["stage"] == s for r in rows) for s in ("mn", "srn", "gan")}
        assert counts == {"mn": n_mn, "srn": n_srn, "gan": tiny_cfg.n_loop}

    def test_second_run_reuses_everything(self, tiny_cfg):
        first = pl.train_run(tiny_cfg)
        again = pl.train_run(tiny_cfg)
        assert again.resumed == ["mn", "srn", "gan"]
        assert again.bundle.G.checksum() == first.bundle.G.checksum()

    def test_resume_matches_uninterrupted(self, tiny_cfg):
        full = pl.eval_run(tiny_cfg, "gzsl")
        shutil.rmtree(pl.stage_dir(tiny_cfg, "gan", pl.load_dataset(tiny_cfg)))
        resumed = pl.eval_run(tiny_cfg, "gzsl")
        for k in ("u", "s", "h"):
            assert abs(getattr(resumed, k) - getattr(full, k)) <= 1e-9

    def test_partial_stage_is_retrained(self, tiny_cfg):
        run = pl.train_run(tiny_cfg)
        (run.stage_dirs["gan"] / "DONE").unlink()
        again = pl.train_run(tiny_cfg)
        assert again.resumed == ["mn", "srn"]
        assert again.bundle.G.checksum() == run.bundle.G.checksum()

    def test_deterministic_across_directories(self, tiny_cfg, tmp_path):
        a = pl.train_run(tiny_cfg.replace(out_dir=str(tmp_path / "a")))
        b = pl.train_run(tiny_cfg.replace(out_dir=str(tmp_path / "b")))
        for stage in ("mn", "srn", "gan"):
            for f in sorted(a.stage_dirs[stage].glob("*.ckpt")):
                assert f.read_bytes() == (b.stage_dirs[stage] / f.name).read_bytes()


class TestEvaluation:
    def test_zsl_report_has_t1_only(self, tiny_cfg):
        r = pl.eval_run(tiny_cfg, "zsl")
        assert r.t1 is not None and (r.u, r.s, r.h) == (None, None, None)
        assert (Path(tiny_cfg.out_dir) / "eval-zsl-C5.txt").exists()

    def test_gzsl_h_recomputable(self, tiny_cfg):
        r = pl.eval_run(tiny_cfg, "gzsl")
        assert r.t1 is None
        assert r.h == pytest.approx(ev.harmonic_mean(r.u, r.s), abs=1e-15)

    def test_repeat_eval_identical(self, tiny_cfg):
        assert pl.eval_run(tiny_cfg, "gzsl") == pl.eval_run(tiny_cfg, "gzsl")

    def test_c1_equals_c5_with_zero_weights(self, tiny_cfg):
        ds = pl.load_dataset(tiny_cfg)
        cache = {}
        c1 = pl.run_ablation(ds, "C1", tiny_cfg, cache=cache)
        c5 = pl.run_ablation(ds, "C5", tiny_cfg.replace(omega1=0.0, omega2=0.0), cache=cache)
        assert (c5.omega1, c5.omega2) == (0.0, 0.0)
        assert (c1.u, c1.s, c1.h, c1.per_class) == (c5.u, c5.s, c5.h, c5.per_class)

    def test_variant_wiring(self, tiny_cfg):
        ds = pl.load_dataset(tiny_cfg)
        reports = pl.run_ablation_suite(ds, tiny_cfg)
        assert [r.variant for r in reports] == list(pl.VARIANTS)
        by = {r.variant: r for r in reports}
        assert by["C1"].omega1 == by["C1"].omega2 == 0.0
        assert by["C4"].omega1 == 0.0
        assert by["C5"].omega1 in ev.OMEGA_GRID and by["C5"].omega2 in ev.OMEGA_GRID

    def test_unknown_variant(self, tiny_cfg):
        with pytest.raises(ValueError, match="unknown variant"):
            pl.run_ablation(pl.load_dataset(tiny_cfg), "C9", tiny_cfg)

    def test_variant_needs_matching_generator(self, tiny_cfg):
        ds = pl.load_dataset(tiny_cfg)
        cache = {}
        pl.run_ablation(ds, "C1", tiny_cfg, cache=cache)
        with pytest.raises(ValueError, match="classic_a"):
            pl.evaluate_pipeline(tiny_cfg, ds, cache["R"], cache["gan:sr"], "gzsl", "A")

    def test_inductive_training(self, tiny_cfg):
        ds = pl.load_dataset(tiny_cfg)
        M, _ = pl.fit_metric(tiny_cfg, ds)
        R, _ = pl.fit_srn(tiny_cfg, ds, M)
        pl.fit_gan(tiny_cfg, ds, R, M)
        assert ds.unseen_semantic_reads == 0


def test_stage_rng_streams_independent():
    a = pl.stage_rng(0, "gan").integers(0, 2**32, 4)
    b = pl.stage_rng(0, "mn").integers(0, 2**32, 4)
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(a, pl.stage_rng(0, "gan").integers(0, 2**32, 4))

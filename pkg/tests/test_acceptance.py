"""Acceptance suite: one test per criterion, at the stated tolerances.

Trained artifacts are built once per configuration hash and cached under
.cache/acceptance/<hash>/ inside the repository; delete that directory to
force a full rebuild (first build trains 24 codecs and 9 transforms and
takes tens of minutes on a desktop CPU; later runs reuse everything).

Each test prints one `[criterion NN] PASS/FAIL` line.
"""

import csv
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from vfcodec import evaluate as ev
from vfcodec import pipeline
from vfcodec.cli import main as cli_main
from vfcodec.config import ExperimentConfig
from vfcodec.errors import BitstreamError, CoderError
from vfcodec.codec import FeatureCodec, bitstream
from vfcodec.codec import rangecoder as rc
from vfcodec.fst import FeatureSpaceTransform
from vfcodec.nn import Tensor, no_grad
from vfcodec.training import build_ablation
from vfcodec.world import generate_sequence
from vfcodec.world.metrics import miou

from gradient_sweep import build_cases
from helpers import numeric_grad

ACCEPT_CFG = ExperimentConfig.toy(
    stage_steps=(150, 150, 150, 150, 150),
    fst_steps=2400,
    fst_width=24,
    train_sequences=10,
    test_sequences=3,
    num_frames=12,
    max_velocity=3,
    calib_steps=350,
    eval_seeds=(301, 302, 303),
)

CACHE_ROOT = Path(__file__).resolve().parent.parent / ".cache" / "acceptance"

CODEC_ABLATIONS = ("no-scheme-memc", "no-conditions", "no-perception-loss",
                   "no-both-perception", "no-all")
FST_ABLATIONS = ("fst-no-up-down", "fst-no-down-up", "fst-bottleneck-only")


def _report(num: int, name: str, ok: bool, detail: str = ""):
    status = "PASS" if ok else "FAIL"
    print(f"\n[criterion {num:02d}] {status} - {name}" + (f" ({detail})" if detail else ""))
    assert ok, f"criterion {num}: {name} {detail}"


@pytest.fixture(scope="session")
def experiment():
    """Full-variant artifacts: world, 4 rate points, transform, curves."""
    cfg = ACCEPT_CFG
    root = str(CACHE_ROOT / f"{cfg.config_hash():08x}")
    os.makedirs(root, exist_ok=True)
    pipeline.gen_data(cfg, root, reuse=True)
    world = pipeline.get_world(cfg, root)
    pipeline.train_variant(cfg, root, world, "full", reuse=True)
    full_curve, seed_curves = pipeline.build_curves(cfg, root, world, "full", reuse=True)
    return {"cfg": cfg, "root": root, "world": world,
            "full_curve": full_curve, "seed_curves": seed_curves}


@pytest.fixture(scope="session")
def ablation_experiment(experiment):
    """Every ablation variant trained and evaluated against the full model."""
    cfg, root, world = (experiment[k] for k in ("cfg", "root", "world"))
    curves = {}
    for variant in CODEC_ABLATIONS + FST_ABLATIONS:
        pipeline.train_variant(cfg, root, world, variant, reuse=True)
        curves[variant], _ = pipeline.build_curves(cfg, root, world, variant, reuse=True)
    return {**experiment, "variant_curves": curves}


def _stats_rows(root, variant):
    with open(os.path.join(root, "curves", f"{variant}_stats.csv")) as fh:
        return list(csv.DictReader(fh))


def _rate_means(rows, column):
    by_rate = {}
    for r in rows:
        by_rate.setdefault(float(r["lambda_rate"]), []).append(float(r[column]))
    return {rate: float(np.mean(v)) for rate, v in by_rate.items()}


def _lowest_rate_entry(cfg, root, world, variant="full"):
    spec = build_ablation(variant)
    rate = min(cfg.lambda_rates)
    codec = FeatureCodec.load(
        cfg, world, os.path.join(root, "models",
                                 f"codec_{spec.codec_variant}_l{int(rate)}.bin"))
    fst = FeatureSpaceTransform.load(cfg, os.path.join(root, "models",
                                                       f"fst_{variant}.bin"))
    return codec, fst


class TestCriterion01CoderCorrectness:
    def test_thousand_randomized_roundtrips(self):
        start = time.time()
        rng = np.random.default_rng(0xC0DE)
        worst_excess = -1e18
        for case in range(1000):
            k = int(rng.integers(2, 300)) if case % 7 else int(rng.integers(300, 4096))
            n = int(rng.integers(0, 500))
            probs = rng.dirichlet(np.full(k, float(rng.uniform(0.05, 2.0))))
            freqs = rc.quantize_pmf(probs[None])[0]
            p = freqs / freqs.sum()
            symbols = rng.choice(k, size=n, p=p).tolist()
            tables = rc.cumulative_rows(np.tile(freqs, (n, 1)))
            data = rc.encode_with_tables(symbols, tables)
            assert rc.decode_with_tables(data, tables, n) == symbols, f"case {case}"
            if n:
                ideal = float(-np.sum(np.log2(p[symbols])))
                worst_excess = max(worst_excess, len(data) * 8 - (ideal * 1.001 + 64))
        elapsed = time.time() - start
        _report(1, "range coder: 1000 exact round trips within the length bound",
                worst_excess <= 0 and elapsed < 30,
                f"worst length excess {worst_excess:.1f} bits, {elapsed:.1f}s")


class TestCriterion02GradientSuite:
    def test_every_op_fifty_cases(self):
        start = time.time()
        failures = []
        op_counts = {}
        for case_seed in range(50):
            rng = np.random.default_rng(1000 + case_seed)
            for name, fn, arrays in build_cases(rng):
                op_counts[name] = op_counts.get(name, 0) + 1
                tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
                out = fn(*tensors)
                out.backward()
                for idx, (t, arr) in enumerate(zip(tensors, arrays)):
                    def probe(x, idx=idx, fn=fn, arrays=arrays):
                        others = [a.copy() for a in arrays]
                        others[idx] = x
                        return float(fn(*[Tensor(o) for o in others]).data)

                    num = numeric_grad(probe, arr.copy(), eps=1e-5)
                    denom = np.maximum(np.abs(num) + np.abs(t.grad), 1e-3)
                    rel = float((np.abs(num - t.grad) / denom).max())
                    if rel > 1e-4:
                        failures.append((name, case_seed, idx, rel))
        elapsed = time.time() - start
        assert min(op_counts.values()) >= 50
        _report(2, f"gradient suite over {len(op_counts)} ops x 50 cases",
                not failures and elapsed < 300,
                f"{len(failures)} failures, {elapsed:.1f}s")


class TestCriterion03NoDrift:
    def test_fifty_frame_determinism_and_fault_injection(self, experiment):
        start = time.time()
        cfg, root, world = (experiment[k] for k in ("cfg", "root", "world"))
        codec, _ = _lowest_rate_entry(cfg, root, world)
        seq = generate_sequence(424242, cfg.height, cfg.width, num_frames=50,
                                num_sprites=cfg.num_sprites,
                                max_velocity=cfg.max_velocity)
        enc_state = codec.new_state()
        records, recons = [], []
        for frame in seq.frames:
            res = codec.encode_frame(world.extract_features(frame), enc_state)
            records.append(res.record)
            recons.append(res.f_hat)
        blob = bitstream.serialize(records, cfg.width, cfg.height, cfg.config_hash())
        back, _ = bitstream.parse(blob)
        dec_state = codec.new_state()
        drift_free = True
        for i, rec in enumerate(back):
            decoded = codec.decode_frame(rec, dec_state)
            if not np.array_equal(decoded, recons[i]):
                drift_free = False
                break

        flips_detected = True
        rng = np.random.default_rng(7)
        payload_span = len(blob) - bitstream.HEADER_LEN - 4
        positions = rng.choice(payload_span, size=min(600, payload_span), replace=False)
        for pos in positions:
            corrupt = bytearray(blob)
            corrupt[bitstream.HEADER_LEN + int(pos)] ^= 0x10
            try:
                bitstream.parse(bytes(corrupt))
                flips_detected = False
                break
            except BitstreamError:
                pass
        elapsed = time.time() - start
        _report(3, "50-frame no-drift determinism + fault injection",
                drift_free and flips_detected and elapsed < 120,
                f"{len(records)} frames, {len(positions)} flips, {elapsed:.1f}s")


class TestCriterion04RateAccounting:
    def test_exact_bpp_and_estimate_bound(self, experiment):
        cfg, root, world = (experiment[k] for k in ("cfg", "root", "world"))
        codec, _ = _lowest_rate_entry(cfg, root, world)
        seq = pipeline.load_test_set(cfg, root, cfg.eval_seeds[0])[0]
        records, recons, stats = ev.encode_sequence(codec, world, seq)
        blob = bitstream.serialize(records, cfg.width, cfg.height, cfg.config_hash())
        payload = bitstream.payload_bytes(records)
        reported = ev.bpp(blob, cfg.width, cfg.height)
        exact = reported == (8 * payload) / (cfg.width * cfg.height * len(records))

        bound_ok = True
        worst = 0.0
        for rec, est in zip(records, stats):
            if rec.frame_type != bitstream.FRAME_P:
                continue
            for name, sub in zip(bitstream.P_SUBSTREAM_NAMES, rec.substreams):
                diff = abs(len(sub) * 8.0 - est[name])
                margin = diff - (0.001 * est[name] + 64.0)
                worst = max(worst, margin)
                if margin > 0:
                    bound_ok = False
        _report(4, "exact bpp accounting + estimate-vs-measured bound",
                exact and bound_ok, f"worst margin {worst:+.1f} bits")


class TestCriterion05BdRateOracle:
    def test_closed_forms(self):
        points = [(0.11, 0.42), (0.23, 0.55), (0.45, 0.63), (0.9, 0.70)]
        doubled = [(2 * r, s) for r, s in points]
        ident = ev.bd_rate(points, list(points))
        plus = ev.bd_rate(points, doubled)
        minus = ev.bd_rate(doubled, points)
        ok = (ident == 0.0 and abs(plus - 100.0) <= 1e-6 and abs(minus + 50.0) <= 1e-6)
        _report(5, "BD-rate closed-form oracles (0, +100, -50)", ok,
                f"got {ident:.2e}, {plus:.8f}, {minus:.8f}")


class TestCriterion06EntropyOracle:
    def test_values_and_cascade(self, experiment):
        cfg, root, world = (experiment[k] for k in ("cfg", "root", "world"))
        half = np.zeros((1, 4, 4))
        half[0, :2] = 1.0
        four = np.tile(np.array([0.0, 1, 2, 3])[None, :, None], (64, 1, 4)).reshape(64, 4, 4)
        exact = (ev.entropy_per_pixel(np.full((3, 5, 5), 2.0)) == 0.0
                 and math.isclose(ev.entropy_per_pixel(half), 1.0, rel_tol=1e-9)
                 and math.isclose(ev.entropy_per_pixel(four), 128.0, rel_tol=1e-9))

        codec, _ = _lowest_rate_entry(cfg, root, world)
        seqs = [s for seed in cfg.eval_seeds
                for s in pipeline.load_test_set(cfg, root, seed)]
        fraction = ev.entropy_cascade_fraction(cfg, codec, world, seqs)
        _report(6, "entropy oracles exact + cascade decreasing on >= 90% of frames",
                exact and fraction >= 0.9, f"cascade fraction {fraction:.3f}")


class TestCriterion07RdTradeoff:
    def test_monotone_rate_and_distortion(self, experiment):
        cfg, root = experiment["cfg"], experiment["root"]
        rows = _stats_rows(root, "full")
        bpp_by_rate = _rate_means(rows, "bpp")
        df_by_rate = _rate_means(rows, "d_f")
        rates = sorted(bpp_by_rate)
        bpps = [bpp_by_rate[r] for r in rates]
        dfs = [df_by_rate[r] for r in rates]
        rho_bpp = ev.spearman(rates, bpps)
        rho_df = ev.spearman(rates, dfs)
        strictly = (all(b > a for a, b in zip(dfs, dfs[1:]))
                    and all(a > b for a, b in zip(bpps, bpps[1:])))
        _report(7, "four rate points: bpp strictly decreasing, distortion increasing",
                strictly and rho_bpp == -1.0 and rho_df == 1.0,
                f"bpp {['%.3f' % b for b in bpps]}, d_f {['%.4f' % d for d in dfs]}")


class TestCriterion08ConditioningHelps:
    def test_bdrate_sign_and_latent_bits(self, ablation_experiment):
        cfg, root, world = (ablation_experiment[k] for k in ("cfg", "root", "world"))
        bd = ev.bd_rate(ablation_experiment["full_curve"],
                        ablation_experiment["variant_curves"]["no-conditions"])
        full_bits = float(np.mean([float(r["residual_bits"])
                                   for r in _stats_rows(root, "full")]))
        nc_bits = float(np.mean([float(r["residual_bits"])
                                 for r in _stats_rows(root, "no-conditions")]))

        codec, _ = _lowest_rate_entry(cfg, root, world)
        seqs = pipeline.load_test_set(cfg, root, cfg.eval_seeds[0])[:2]
        sub_bits = float(np.mean([ev.subtraction_residual_bits(cfg, codec, world, s)
                                  for s in seqs]))
        ordering = full_bits < nc_bits and full_bits < sub_bits and nc_bits < sub_bits
        _report(8, "conditioning helps: BD-rate > 0 without conditions, bit ordering",
                bd > 0 and ordering,
                f"bd {bd:+.2f}%, bits {full_bits:.0f} < {nc_bits:.0f} < {sub_bits:.0f}")


class TestCriterion09ComponentAblations:
    def test_all_signs_positive(self, ablation_experiment):
        full_curve = ablation_experiment["full_curve"]
        curves = ablation_experiment["variant_curves"]
        bds = {}
        for variant in ("no-scheme-memc", "no-perception-loss", "no-both-perception",
                        "no-all") + FST_ABLATIONS:
            bds[variant] = ev.bd_rate(full_curve, curves[variant])
        ok = all(v > 0 for v in bds.values())
        detail = ", ".join(f"{k} {v:+.1f}%" for k, v in bds.items())
        _report(9, "component ablations all cost rate (sign-only)", ok, detail)


class TestCriterion10FstEfficacy:
    def test_efficacy_freeze_and_size(self, experiment):
        cfg, root, world = (experiment[k] for k in ("cfg", "root", "world"))
        codec, fst = _lowest_rate_entry(cfg, root, world)

        # oracle score via the task's own stem on lossless frames
        oracle_scores = []
        coded_rows = _stats_rows(root, "full")
        rate_lo = min(float(r["lambda_rate"]) for r in coded_rows)
        coded = float(np.mean([float(r["miou"]) for r in coded_rows
                               if float(r["lambda_rate"]) == rate_lo]))
        with no_grad():
            for seed in cfg.eval_seeds:
                for seq in pipeline.load_test_set(cfg, root, seed):
                    for frame, label in zip(seq.frames, seq.labels):
                        pred = world.task.predict(world.task.stem(Tensor(frame)))
                        oracle_scores.append(miou(pred, label, cfg.num_classes))
        oracle = float(np.mean(oracle_scores))
        efficacy = coded >= 0.9 * oracle

        rhos = [ev.spearman(c.rates(), c.scores())
                for c in experiment["seed_curves"].values()]
        mean_rho = float(np.mean(rhos))

        world_sum = world.checksum()
        codec_sum = codec.store.checksum()
        from vfcodec.training import train_fst
        seqs = pipeline.load_train_set(cfg, root)[:2]
        train_fst(cfg.replace(fst_steps=6), codec, world, seqs, seed=9)
        frozen = (world.checksum() == world_sum and codec.store.checksum() == codec_sum)

        task_params = world.task.store.param_count()
        light = fst.param_count() < 0.2 * task_params
        _report(10, "transform efficacy, curve monotonicity, freeze, size",
                efficacy and mean_rho >= 0.8 and frozen and light,
                f"miou {coded:.3f} vs oracle {oracle:.3f} "
                f"({coded / oracle:.2%}), spearman {mean_rho:.2f}, "
                f"fst/task params {fst.param_count()}/{task_params}")


class TestCriterion11Reproducibility:
    def test_pipeline_rerun_byte_identical(self, tmp_path):
        cfg = ExperimentConfig.toy(
            stage_steps=(3, 3, 3, 3, 3), fst_steps=6, calib_steps=20,
            calib_sequences=1, train_sequences=2, test_sequences=1,
            num_frames=4, eval_seeds=(301,), batch_size=2)
        digests = []
        for run in ("a", "b"):
            root = str(tmp_path / run)
            cfg_path = str(tmp_path / f"cfg_{run}.json")
            from vfcodec.config import save_config
            save_config(cfg.replace(out_root=root), cfg_path)
            assert cli_main(["--config", cfg_path, "gen-data"]) == 0
            for rate in cfg.lambda_rates:
                assert cli_main(["--config", cfg_path, "train-codec",
                                 "--lambda-rate", str(rate)]) == 0
            assert cli_main(["--config", cfg_path, "train-fst"]) == 0
            assert cli_main(["--config", cfg_path, "eval"]) == 0
            seq_dir = os.path.join(root, "data", "test", "301", "seq_0000")
            ckpt = os.path.join(root, "models", "codec_full_l16.bin")
            assert cli_main(["--config", cfg_path, "encode", "--checkpoint", ckpt,
                             "--sequence", seq_dir,
                             "--out", os.path.join(root, "stream.vfc")]) == 0
            run_digest = {}
            for dirpath, _, files in os.walk(root):
                for fname in files:
                    path = os.path.join(dirpath, fname)
                    rel = os.path.relpath(path, root)
                    if fname == "config.json":
                        continue   # carries out_root, which differs by design
                    with open(path, "rb") as fh:
                        run_digest[rel] = fh.read()
            digests.append(run_digest)
        same_names = set(digests[0]) == set(digests[1])
        diffs = [k for k in digests[0] if digests[0][k] != digests[1].get(k)]
        _report(11, "scripted pipeline rerun is byte-identical",
                same_names and not diffs,
                f"{len(digests[0])} artifacts, diffs: {diffs[:4]}")

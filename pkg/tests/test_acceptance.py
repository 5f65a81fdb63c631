"""Acceptance criteria 1-9, each marked with its number.

The terminal summary prints one PASS/FAIL line per criterion. Criterion 6
is a full training experiment and dominates the runtime of the suite.
"""

import csv
import io
import subprocess
import sys

import numpy as np
import pytest

from conftest import finite_difference_check
from mssit import formats
from mssit import tensor as T
from mssit.augment import (
    AugmentConfig,
    SurfaceSample,
    apply_augmentation,
    draw_augmentation,
    face_orientations,
    random_rotation,
    random_warp,
    sample_coarse_displacements,
    warp_positions,
)
from mssit.cli import main
from mssit.icomesh import barycentric_map, build_hierarchy, build_icosphere, mean_edge_length, resample
from mssit.model import ModelConfig, forward, init_state, tiny_config, window_mhsa
from mssit.patching import build_patch_maps, cyclic_shift, merge_tokens, partition_tokens, shift_index
from mssit.synth import regression_samples, segmentation_samples, synthesise, write_dataset
from mssit.tensor import Tensor
from mssit.train import Dataset, TrainConfig, dice_scores, evaluate, train_loop
from test_model import attention_params, masked_attention_oracle, random_state
from test_tensor import OP_CASES


# -- 1 -------------------------------------------------------------------------


@pytest.mark.criterion(1)
def test_encoder_parameter_count(note):
    state = init_state(ModelConfig(), 0)
    n = state.encoder_parameter_count()
    note(1, f"encoder parameters: {n:,} ({n / 27.5e6:.4f} x 27.5M)")
    assert abs(n - 27.5e6) / 27.5e6 < 0.03


# -- 2 -------------------------------------------------------------------------


@pytest.mark.criterion(2)
def test_grid_table():
    maps = build_patch_maps(build_hierarchy(6), w_s=0.5)
    table = {
        level: (maps.level_lengths[level], maps.n_windows(level), maps.window_size[level]) for level in (1, 2, 3, 4)
    }
    assert table == {1: (20480, 320, 64), 2: (5120, 80, 64), 3: (1280, 20, 64), 4: (320, 1, 320)}
    for level in (1, 2, 3, 4):
        assert np.array_equal(np.bincount(maps.window_id[level]), np.full(table[level][1], table[level][2]))


# -- 3 -------------------------------------------------------------------------


@pytest.fixture(scope="module")
def oracle_state():
    return random_state(tiny_config(dtype="float64", heads=(2, 2, 4, 4)), seed=11)


@pytest.mark.criterion(3)
@pytest.mark.parametrize("w_s", [0.5, 0.25])
@pytest.mark.parametrize("level", [1, 2, 3, 4])
@pytest.mark.parametrize("shifted", [False, True], ids=["W", "SW"])
def test_windowed_equals_masked_global(oracle_state, note, w_s, level, shifted):
    maps = build_patch_maps(w_s=w_s)
    cfg = oracle_state.config
    n, d, w = maps.level_lengths[level], cfg.dim(level), maps.window_size[level]
    s = maps.shift_offset[level] if shifted else 0
    heads = cfg.heads[level - 1]
    prefix = f"enc{level}.layer{int(shifted)}.attn"
    x = np.random.default_rng(100 * level + int(shifted)).standard_normal((n, d))
    with T.no_grad():
        got = window_mhsa(x, oracle_state, prefix, heads, w, s).data[0]
    ref = masked_attention_oracle(x, *attention_params(oracle_state, prefix), heads, w, s)
    err = float(np.max(np.abs(got - ref)))
    if level == 1 and shifted and w_s == 0.5:
        note(3, f"level 1 SW-MHSA max abs diff vs masked global attention: {err:.2e}")
    assert err < 1e-6


# -- 4 -------------------------------------------------------------------------


@pytest.mark.criterion(4)
@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients(name):
    assert OP_CASES[name]() < 1e-6


def _end_to_end(config, names, note, label, h=1e-5, order=2):
    state = random_state(config, seed=2)
    x = Tensor(np.random.default_rng(3).standard_normal((1, 20480, config.token_width)))
    out_shape = forward(x, state).shape
    r = Tensor(np.random.default_rng(4).standard_normal(out_shape))
    params = [state.params[n] for n in names]

    def loss(_):
        return T.sum(T.mul(forward(x, state), r))

    # Softmax ignores a constant added to a row of scores, so key-bias
    # gradients vanish identically and carry no relative information.
    candidates, key_bias = [], []
    for n, p in zip(names, params):
        if n.endswith("attn.qkv.bias"):
            d = p.data.size // 3
            candidates.append(np.r_[0:d, 2 * d : 3 * d])
            key_bias.append((p, slice(d, 2 * d)))
        else:
            candidates.append(None)
    worst = finite_difference_check(loss, params, h=h, n_probe=1, seed=5, candidates=candidates, order=order)
    scale = max(float(np.max(np.abs(p.grad))) for p in params)
    key = max((float(np.max(np.abs(p.grad[sl]))) for p, sl in key_bias), default=0.0)
    note(4, f"end-to-end {label}: worst relative error {worst:.2e} over {len(params)} tensors")
    assert key < 1e-10 * scale
    return worst


@pytest.mark.criterion(4)
def test_end_to_end_regression(note):
    cfg = tiny_config(dtype="float64")
    names = list(init_state(cfg, 0).params)
    assert _end_to_end(cfg, names, note, "regression (every tensor)") < 1e-5


@pytest.mark.criterion(4)
def test_end_to_end_segmentation(note):
    cfg = tiny_config(dtype="float64", task="segmentation", num_classes=3)
    names = [n for n in init_state(cfg, 0).params if n.startswith(("dec", "seg", "enc1.", "pos_embed"))]
    # The summed loss is O(1e3) here, so the five-point stencil with a larger
    # step keeps rounding noise well below the tolerance.
    assert _end_to_end(cfg, names, note, "segmentation (decoder and level 1)", h=1e-3, order=4) < 1e-5


# -- 5 -------------------------------------------------------------------------


@pytest.mark.criterion(5)
@pytest.mark.parametrize("level", range(8))
def test_counting_law_manifold_euler(hierarchy, level):
    ico = hierarchy[level]
    assert ico.n_vertices == 10 * 4**level + 2 and ico.n_faces == 20 * 4**level
    f = ico.faces
    e = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
    edges, counts = np.unique(e, axis=0, return_counts=True)
    assert np.all(counts == 2)
    assert ico.n_vertices - len(edges) + ico.n_faces == 2
    assert np.max(np.abs(np.linalg.norm(ico.vertices, axis=1) - 1)) < 1e-12


@pytest.mark.criterion(5)
def test_barycentric_partition_of_unity_and_constants():
    src = build_icosphere(5)
    pts = np.random.default_rng(0).standard_normal((5000, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    bmap = barycentric_map(src, pts)
    assert np.max(np.abs(bmap.weights.sum(axis=1) - 1)) < 1e-12 and bmap.weights.min() >= 0
    assert np.max(np.abs(resample(np.full(src.n_vertices, 3.7), bmap) - 3.7)) < 1e-12


@pytest.mark.criterion(5)
def test_merge_partition_and_shift_bijections():
    x = np.random.default_rng(1).standard_normal((20480, 6))
    assert np.array_equal(partition_tokens(merge_tokens(x)), x)
    assert np.array_equal(merge_tokens(partition_tokens(merge_tokens(x))), merge_tokens(x))
    assert np.array_equal(cyclic_shift(cyclic_shift(x, 32), 20480 - 32), x)
    assert np.array_equal(np.sort(shift_index(20480, 32)), np.arange(20480))


# -- 6 -------------------------------------------------------------------------

SHIFT_N, SHIFT_ITERS, SHIFT_SEEDS = 200, 2000, (0, 1, 2)


def shift_run(manifest, w_s, seed, out_dir):
    ds = Dataset.from_manifest(manifest)
    cfg = TrainConfig(
        lr=1e-3, warmup_iters=100, iterations=SHIFT_ITERS, batch_size=1, augment=False, seed=seed, eval_every=4
    )
    res = train_loop(ds, tiny_config(in_channels=4, w_s=w_s), cfg, out_dir)
    return evaluate(ds, ds.indices("val"), res.state, *_target_norm(ds))[0]


def _target_norm(ds):
    t = ds.targets(ds.indices("train"))
    return float(t.mean()), float(t.std())


@pytest.mark.criterion(6)
@pytest.mark.slow
def test_half_shift_not_worse_than_no_shift(tmp_path, note):
    manifest = synthesise("regression", SHIFT_N, 0, tmp_path / "data")
    results = {}
    for w_s in (0.5, 0.0):
        results[w_s] = [shift_run(manifest, w_s, s, tmp_path / f"ws{w_s}_s{s}") for s in SHIFT_SEEDS]
    mean = {k: float(np.mean(v)) for k, v in results.items()}
    for k in (0.5, 0.0):
        note(6, f"w_s={k}: val MSE per seed {[round(v, 4) for v in results[k]]}, mean {mean[k]:.4f}")
    assert mean[0.5] <= mean[0.0]


# -- 7 -------------------------------------------------------------------------


@pytest.mark.criterion(7)
def test_overfit_one_regression_sample(tmp_path, note):
    sample = regression_samples(1, 0)[0]
    sample.target = (sample.target - 35.0) / 3.0  # an O(1) target, kept raw so the task is not trivial
    ds = Dataset.from_manifest(write_dataset(tmp_path, [sample], ["train"]))
    cfg = TrainConfig(
        lr=1e-3, warmup_iters=20, iterations=200, batch_size=1, augment=False, normalise_targets=False, eval_every=50
    )
    res = train_loop(ds, tiny_config(in_channels=4), cfg, tmp_path / "run")
    mse = evaluate(ds, [0], res.state)[0]
    note(7, f"1-sample regression: train MSE {mse:.2e} (target {sample.target:.3f})")
    assert mse < 1e-3


@pytest.mark.criterion(7)
def test_overfit_one_segmentation_sample(tmp_path, note, capsys):
    k = 8
    sample = segmentation_samples(1, 0, n_classes=k)[0]
    manifest = write_dataset(tmp_path / "data", [sample], ["train"])
    ds = Dataset.from_manifest(manifest)
    cfg = TrainConfig.for_task("segmentation", lr=3e-3, warmup_iters=20, iterations=300, augment=False, eval_every=100)
    res = train_loop(ds, tiny_config(in_channels=4, task="segmentation", num_classes=k), cfg, tmp_path / "run")
    d = tmp_path / "data" / "data"
    code = main([
        "segment", "--checkpoint", str(res.final_path), "--surface", str(d / "sub-0000.surf"),
        "--out", str(tmp_path / "pred.labl"), "--labels", str(d / "sub-0000.labl"), "--dice",
    ])
    out = capsys.readouterr().out
    rows = list(csv.reader(io.StringIO(out[out.index("class,dice"):])))[1:-1]
    scores = np.array([float(r[1]) for r in rows])
    note(7, f"1-sample segmentation ({k} classes): per-class Dice min {scores.min():.4f}")
    assert code == 0 and scores.shape == (k,)
    assert np.array_equal(scores, dice_scores(formats.read_labels(tmp_path / "pred.labl"), sample.labels, k).round(6))
    assert np.all(scores > 0.99)


# -- 8 -------------------------------------------------------------------------


@pytest.mark.criterion(8)
def test_augmentation_identity():
    data = np.random.default_rng(0).standard_normal((40962, 3))
    assert np.array_equal(random_rotation(data, (0, 0, 0)), data)
    assert np.array_equal(random_warp(data, AugmentConfig(), None, displacements=np.zeros((162, 3))), data)
    sample = SurfaceSample(data)
    rng = np.random.default_rng(1)
    assert all(apply_augmentation(sample, AugmentConfig(probability=0.0), rng) is sample for _ in range(20))


@pytest.mark.criterion(8)
@pytest.mark.parametrize("seed", range(5))
def test_warp_bound_and_orientation(seed):
    ico6 = build_icosphere(6)
    bound = mean_edge_length(build_icosphere(2)) / 8
    coarse = sample_coarse_displacements(AugmentConfig(), np.random.default_rng(seed))
    warped, fine = warp_positions(coarse)
    assert np.max(np.linalg.norm(fine, axis=1)) <= bound + 1e-9
    assert np.max(np.abs(np.linalg.norm(warped, axis=1) - 1)) < 1e-12
    assert np.all(np.sign(face_orientations(warped, ico6)) == np.sign(face_orientations(ico6.vertices, ico6)))


@pytest.mark.criterion(8)
def test_augmentation_frequencies(note):
    rng = np.random.default_rng(12345)
    kinds = [draw_augmentation(AugmentConfig(), rng) for _ in range(10000)]
    applied = 10000 - kinds.count("none")
    freq, ratio = applied / 10000, kinds.count("rotation") / applied
    note(8, f"augmented {freq:.4f} of 10000 draws; rotation share {ratio:.4f}")
    assert 0.78 <= freq <= 0.82 and 0.47 <= ratio <= 0.53


# -- 9 -------------------------------------------------------------------------


@pytest.mark.criterion(9)
def test_bit_identical_runs(tmp_path):
    """Two fresh processes, augmentation and dropout on, produce identical files."""
    manifest = synthesise("regression", 6, 3, tmp_path / "data")
    cfg = tmp_path / "run.cfg"
    formats.write_config(
        cfg,
        {
            "model": tiny_config(in_channels=4, dropout=0.1).to_dict(),
            "train": {"lr": 1e-3, "warmup_iters": 2, "batch_size": 2, "augment": True, "aug_probability": 1.0},
        },
    )
    outputs = []
    for run in ("a", "b"):
        out = tmp_path / run
        proc = subprocess.run(
            [sys.executable, "-m", "mssit.cli", "train", "--manifest", str(manifest), "--config", str(cfg),
             "--out", str(out), "--iterations", "6", "--seed", "9"],
            capture_output=True,
        )
        assert proc.returncode == 0, proc.stderr.decode()
        outputs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    assert set(outputs[0]) == {"best.mswt", "best.mswt.cfg", "final.mswt", "final.mswt.cfg", "metrics.csv"}
    assert outputs[0] == outputs[1]

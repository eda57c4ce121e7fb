from collections import deque

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from rogbench.errors import CoverageError, MissingReferenceError
from rogbench.inference import (
    TiledPredictor,
    fuse_predictions,
    fuse_small_components,
    fusion_weights,
    largest_component,
    plan_tiles,
    predict_case,
)
from rogbench.model import LatticeConfig, build_lattice
from rogbench.volumes import LabelMask, TaskSpec, Volume


# --- tiling ----------------------------------------------------------------


def test_plan_exact_tiling():
    plan = plan_tiles((64, 64, 64), (32, 32, 32), overlap_fraction=0.0)
    assert len(plan.offsets) == 8
    assert plan.offsets == [
        (a, b, c) for a in (0, 32) for b in (0, 32) for c in (0, 32)
    ]


def test_plan_clamped_last_offset():
    plan = plan_tiles((48, 48, 48), (32, 32, 32), overlap_fraction=0.0)
    assert plan.offsets == [(a, b, c) for a in (0, 16) for b in (0, 16) for c in (0, 16)]


def test_plan_single_tile():
    plan = plan_tiles((32, 32, 32), (32, 32, 32))
    assert plan.offsets == [(0, 0, 0)]


def test_plan_rejects_bad_input():
    with pytest.raises(ValueError):
        plan_tiles((0, 4, 4), (2, 2, 2))
    with pytest.raises(ValueError):
        plan_tiles((16, 16, 16), (32, 32, 32))
    with pytest.raises(ValueError):
        plan_tiles((16, 16, 16), (8, 8, 8), overlap_fraction=1.0)


@settings(max_examples=40, deadline=None)
@given(
    st.tuples(*[st.integers(32, 70)] * 3),
    st.sampled_from([0.0, 0.25, 0.5]),
)
def test_plan_full_coverage(shape, overlap):
    plan = plan_tiles(shape, (32, 32, 32), overlap_fraction=overlap)
    covered = np.zeros(shape, dtype=bool)
    for off in plan.offsets:
        covered[tuple(slice(o, o + 32) for o in off)] = True
    assert covered.all()
    assert plan.offsets == sorted(plan.offsets)
    assert len(set(plan.offsets)) == len(plan.offsets)


# --- fusion ----------------------------------------------------------------


def _softmax_patches(n, shape=(3, 8, 8, 8), seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        z = rng.normal(size=shape)
        e = np.exp(z - z.max(axis=0))
        out.append(e / e.sum(axis=0))
    return out


def test_fuse_single_patch_identity():
    (p,) = _softmax_patches(1)
    fused = fuse_predictions([p], [(0, 0, 0)], (8, 8, 8))
    np.testing.assert_allclose(fused, p, atol=1e-6)


def test_fuse_equidistant_simple_average():
    # Two 4^3 patches shifted by 3 along axis 0: centers at z=1.5 and z=4.5,
    # so every overlap voxel (z=3) is exactly equidistant -> plain mean.
    a = np.zeros((2, 4, 4, 4))
    a[0] = 1.0
    b = np.zeros((2, 4, 4, 4))
    b[1] = 1.0
    fused = fuse_predictions([a, b], [(0, 0, 0), (3, 0, 0)], (7, 4, 4))
    np.testing.assert_allclose(fused[0, 3], 0.5, atol=1e-6)
    np.testing.assert_allclose(fused[1, 3], 0.5, atol=1e-6)
    np.testing.assert_allclose(fused[0, :3], 1.0, atol=1e-6)  # covered by a only
    np.testing.assert_allclose(fused[1, 4:], 1.0, atol=1e-6)


def test_fuse_center_weight_ratio():
    # Voxel at patch A's center, also covered by patch B whose center sits at
    # distance d: fused class-0 mass = w_A / (w_A + w_B) with w_A = 1 and
    # w_B = 1/(1 + d/r).
    P = (4, 4, 4)
    a = np.zeros((2, *P))
    a[0] = 1.0
    b = np.zeros((2, *P))
    b[1] = 1.0
    off_b = (2, 0, 0)
    fused = fuse_predictions([a, b], [(0, 0, 0), off_b], (6, 4, 4))
    r = np.linalg.norm(P) / 2.0
    d = 2.0  # |center_b - center_a| along axis 0
    w_b = 1.0 / (1.0 + d / r)
    expected = 1.0 / (1.0 + w_b)
    center = (1, 1, 1)  # voxel index of A's center region: center=(1.5,); use exact center below
    # A's true center (1.5, 1.5, 1.5) is off-grid; test the formula at a voxel
    # equidistant enough: use weight map values directly instead.
    w = fusion_weights(P)
    va = w[3, 1, 1]  # voxel (3,1,1): inside both patches
    vb = w[1, 1, 1]  # same voxel from B's frame: (3,1,1)-(2,0,0)
    got = fused[0, 3, 1, 1]
    np.testing.assert_allclose(got, va / (va + vb), atol=1e-6)
    assert va != pytest.approx(vb)


def test_fusion_weights_peak_at_center():
    w = fusion_weights((5, 5, 5))
    assert w[2, 2, 2] == pytest.approx(1.0)
    assert w.max() == pytest.approx(1.0)
    assert (w > 0).all()


_GRID_OFFSETS = [(a, b, c) for a in (0, 4) for b in (0, 4) for c in (0, 4)]


def test_fuse_output_is_distribution():
    patches = _softmax_patches(8, seed=3)
    fused = fuse_predictions(patches, _GRID_OFFSETS, (12, 12, 12))
    assert (fused >= 0).all()
    np.testing.assert_allclose(fused.sum(axis=0), 1.0, atol=1e-6)


def test_fuse_order_invariance():
    patches = _softmax_patches(8, seed=5)
    offsets = _GRID_OFFSETS
    fused = fuse_predictions(patches, offsets, (12, 12, 12))
    perm = [2, 0, 3, 1, 7, 5, 6, 4]
    fused2 = fuse_predictions([patches[i] for i in perm], [offsets[i] for i in perm], (12, 12, 12))
    np.testing.assert_allclose(fused, fused2, atol=1e-6)


def test_fuse_uncovered_voxel_raises():
    (p,) = _softmax_patches(1)
    with pytest.raises(CoverageError):
        fuse_predictions([p], [(0, 0, 0)], (16, 16, 16))


# --- components ------------------------------------------------------------


def _flood_fill_components(mask):
    """Brute-force 26-connectivity component oracle."""
    mask = np.asarray(mask, dtype=bool)
    seen = np.zeros_like(mask)
    comps = []
    idx = np.argwhere(mask)
    for start in idx:
        s = tuple(start)
        if seen[s]:
            continue
        comp = []
        q = deque([s])
        seen[s] = True
        while q:
            v = q.popleft()
            comp.append(v)
            for dz in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        if dz == dy == dx == 0:
                            continue
                        n = (v[0] + dz, v[1] + dy, v[2] + dx)
                        if all(0 <= n[i] < mask.shape[i] for i in range(3)):
                            if mask[n] and not seen[n]:
                                seen[n] = True
                                q.append(n)
        comps.append(comp)
    return comps


def _oracle_largest(mask):
    comps = _flood_fill_components(mask)
    if not comps:
        return np.zeros_like(np.asarray(mask, dtype=bool))
    best = max(len(c) for c in comps)
    shape = np.asarray(mask).shape

    def min_linear(c):
        return min(np.ravel_multi_index(v, shape) for v in c)

    winner = min((c for c in comps if len(c) == best), key=min_linear)
    out = np.zeros(shape, dtype=bool)
    for v in winner:
        out[tuple(v)] = True
    return out


def test_largest_component_empty_and_single():
    z = np.zeros((4, 4, 4), dtype=bool)
    np.testing.assert_array_equal(largest_component(z), z)
    z[1:3, 1:3, 1:3] = True
    np.testing.assert_array_equal(largest_component(z), z)


def test_largest_component_sizes_10_3_3():
    m = np.zeros((6, 6, 6), dtype=bool)
    m[0, 0, :5] = True  # 5 voxels
    m[1, 0, :5] = True  # +5 connected -> 10
    m[4, 4, :3] = True  # 3
    m[0, 4, :3] = True  # 3
    out = largest_component(m)
    expect = np.zeros_like(m)
    expect[0, 0, :5] = True
    expect[1, 0, :5] = True
    np.testing.assert_array_equal(out, expect)


def test_largest_component_flood_fill_oracle():
    rng = np.random.default_rng(99)
    for _ in range(1000):
        m = rng.random((6, 6, 6)) < 0.3
        np.testing.assert_array_equal(largest_component(m), _oracle_largest(m))


# --- small-component fusion ------------------------------------------------

TASK = TaskSpec(
    ("background", "organ", "tumor"), avg_object_voxels={1: 500.0, 2: 50.0}
)


def _grid_with_speck():
    labels = np.zeros((8, 8, 8), dtype=np.int64)
    labels[2:6, 2:6, 2:6] = 1
    labels[4, 4, 4] = 2  # 1-voxel tumor speck, threshold 0.1*50 = 5
    return LabelMask(labels, num_classes=3)


def test_speck_fused_into_organ():
    out = fuse_small_components(_grid_with_speck(), TASK)
    assert out.labels[4, 4, 4] == 1
    assert not (out.labels == 2).any()


def test_large_tumor_unchanged():
    labels = np.zeros((8, 8, 8), dtype=np.int64)
    labels[1:7, 1:7, 1:7] = 1
    labels[3:5, 3:5, 3:5] = 2  # 8 voxels >= threshold 5
    m = LabelMask(labels, num_classes=3)
    out = fuse_small_components(m, TASK)
    np.testing.assert_array_equal(out.labels, labels)


def test_zero_threshold_identity_on_tumor():
    m = _grid_with_speck()
    out = fuse_small_components(m, TASK, threshold_fraction=0.0)
    np.testing.assert_array_equal(out.labels, m.labels)


def test_missing_avg_sizes_raises():
    task = TaskSpec(("background", "organ", "tumor"))
    with pytest.raises(MissingReferenceError):
        fuse_small_components(_grid_with_speck(), task)


def test_organ_largest_component_filter():
    labels = np.zeros((8, 8, 8), dtype=np.int64)
    labels[1:5, 1:5, 1:5] = 1
    labels[7, 7, 7] = 1  # stray organ voxel far away
    m = LabelMask(labels, num_classes=3)
    out = fuse_small_components(m, TASK)
    assert out.labels[7, 7, 7] == 0
    np.testing.assert_array_equal(out.labels[1:5, 1:5, 1:5], 1)


def test_postprocess_locality():
    m = _grid_with_speck()
    out = fuse_small_components(m, TASK)
    touched = m.labels != out.labels
    assert touched.sum() == 1  # only the speck voxel changed


# --- tiled prediction ------------------------------------------------------


def _tiny_model(patch=(16, 16, 16)):
    cfg = LatticeConfig(
        patch_size=patch, num_classes=3, in_channels=1,
        initial_factors=(2, 2, 2), widths=(2, 4, 8, 16),
    )
    torch.manual_seed(0)
    return build_lattice(cfg).eval()


class _ConstantModel(nn.Module):
    """Uniform logits regardless of input; argmax must fall to class 0."""

    def __init__(self, patch, num_classes=3):
        super().__init__()
        self.cfg = LatticeConfig(
            patch_size=patch, num_classes=num_classes, initial_factors=(1, 1, 1),
            widths=(1, 2, 4, 8),
        )

    def forward(self, x):
        return torch.zeros(x.shape[0], self.cfg.num_classes, *x.shape[2:])


def test_tiled_single_tile_matches_model():
    model = _tiny_model()
    pred = TiledPredictor(model)
    x = torch.randn(1, 16, 16, 16)
    logits, probs = pred.forward(x)
    with torch.no_grad():
        direct = model(x.unsqueeze(0))[0]
    torch.testing.assert_close(logits, direct, rtol=1e-5, atol=1e-5)
    torch.testing.assert_close(probs, torch.softmax(direct, dim=0), rtol=1e-5, atol=1e-5)


def test_tiled_prob_fusion_matches_numpy_path():
    model = _tiny_model()
    pred = TiledPredictor(model, overlap_fraction=0.5)
    x = torch.randn(1, 24, 16, 16)
    _, probs = pred.forward(x)
    plan = plan_tiles((24, 16, 16), (16, 16, 16), 0.5)
    patches = []
    with torch.no_grad():
        for off in plan.offsets:
            sl = tuple(slice(o, o + p) for o, p in zip(off, (16, 16, 16)))
            patches.append(torch.softmax(model(x[(slice(None), *sl)].unsqueeze(0))[0], dim=0).numpy())
    fused = fuse_predictions(patches, plan.offsets, (24, 16, 16))
    np.testing.assert_allclose(probs.detach().numpy(), fused, atol=1e-5)


def test_tiled_gradient_flows_to_input():
    model = _tiny_model()
    pred = TiledPredictor(model)
    x = torch.randn(1, 24, 16, 16, requires_grad=True)
    loss = pred.logits(x).mean()
    loss.backward()
    assert x.grad is not None
    assert float(x.grad.abs().sum()) > 0


def test_predict_case_tie_to_background():
    model = _ConstantModel((8, 8, 8))
    v = Volume(np.random.default_rng(0).normal(size=(1, 8, 8, 8)).astype(np.float32))
    task = TaskSpec(("background", "organ", "tumor"), avg_object_voxels={1: 1.0, 2: 1.0})
    mask = predict_case(model, v, task)
    assert (mask.labels == 0).all()


def test_predict_case_deterministic_and_padded():
    model = _tiny_model()
    # Volume smaller than the patch on one axis: padded then cropped back.
    v = Volume(np.random.default_rng(1).normal(size=(1, 12, 16, 20)).astype(np.float32))
    task = TaskSpec(("background", "organ", "tumor"), avg_object_voxels={1: 1.0, 2: 1.0})
    m1 = predict_case(model, v, task)
    m2 = predict_case(model, v, task)
    assert m1.spatial_shape == (12, 16, 20)
    np.testing.assert_array_equal(m1.labels, m2.labels)

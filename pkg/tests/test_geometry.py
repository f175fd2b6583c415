import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emblab.datagen import ModalitySpec, WorldSpec, build_world, sample_arrays
from emblab.geometry import (
    AlignmentCurve,
    EmbeddingSet,
    anisotropy,
    layerwise_alignment,
    mutual_knn,
)
from emblab.numerics import Rng, cosine
from emblab.toymodel import init_model, spec_for_world


def eset(vectors, modality="m"):
    return EmbeddingSet.from_vectors(modality, np.asarray(vectors, dtype=float))


def naive_anisotropy(vectors):
    n = len(vectors)
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            total += cosine(vectors[i], vectors[j])
    return total / (n * (n - 1) / 2)


def test_embedding_set_validations():
    with pytest.raises(ValueError, match="zero-norm"):
        eset([[0.0, 0.0], [1.0, 0.0]])
    with pytest.raises(ValueError, match="unique"):
        EmbeddingSet("m", (0, 0), np.ones((2, 2)))
    with pytest.raises(ValueError, match="finite"):
        eset([[np.inf, 1.0], [1.0, 0.0]])


def test_anisotropy_identical_vectors():
    v = np.tile([0.3, -0.7, 0.1], (5, 1))
    assert anisotropy(eset(v)) == pytest.approx(1.0, abs=1e-12)


def test_anisotropy_orthonormal():
    assert anisotropy(eset(np.eye(4))) == pytest.approx(0.0, abs=1e-12)


def test_anisotropy_hand_value():
    v = [[1.0, 0.0], [0.0, 1.0], [1 / math.sqrt(2), 1 / math.sqrt(2)]]
    assert anisotropy(eset(v)) == pytest.approx(0.47140, abs=5e-6)


def test_anisotropy_matches_naive_double_loop():
    rng = Rng(17)
    v = rng.normal(40 * 7).reshape(40, 7)
    assert anisotropy(eset(v)) == pytest.approx(naive_anisotropy(v), abs=1e-12)


def test_anisotropy_needs_two_rows():
    with pytest.raises(ValueError, match="at least 2"):
        anisotropy(eset([[1.0, 0.0]]))


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_anisotropy_row_scale_invariant_and_bounded(seed):
    rng = Rng(seed)
    v = rng.normal(12 * 5).reshape(12, 5)
    scales = 0.1 + 5.0 * rng.uniform(12)
    a = anisotropy(eset(v))
    b = anisotropy(eset(v * scales[:, None]))
    assert a == pytest.approx(b, abs=1e-12)
    assert -1.0 <= a <= 1.0


def test_mutual_knn_identical_sets():
    v = Rng(3).normal(20 * 6).reshape(20, 6)
    for k in (1, 5, 19):
        assert mutual_knn(eset(v), eset(v), k) == 1.0


def test_mutual_knn_hand_instance():
    phi = eset([[0.0, 0.01], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]])
    psi = eset([[0.0, 0.01], [10.0, 0.0], [0.0, 1.0], [10.0, 1.0]])
    assert mutual_knn(phi, psi, 1) == 0.0


def test_mutual_knn_exhaustive_oracle():
    rng = Rng(9)
    a = rng.normal(15 * 4).reshape(15, 4)
    b = rng.normal(15 * 4).reshape(15, 4)
    k = 4
    got = mutual_knn(eset(a), eset(b), k)

    def knn_oracle(v):
        out = []
        for i in range(len(v)):
            dists = []
            for j in range(len(v)):
                if j != i:
                    dists.append((1.0 - cosine(v[i], v[j]), j))
            dists.sort()
            out.append({j for _, j in dists[:k]})
        return out

    na, nb = knn_oracle(a), knn_oracle(b)
    expect = np.mean([len(na[i] & nb[i]) / k for i in range(15)])
    assert got == pytest.approx(expect, abs=1e-12)


def test_mutual_knn_symmetry():
    rng = Rng(10)
    a = rng.normal(30 * 5).reshape(30, 5)
    b = rng.normal(30 * 5).reshape(30, 5)
    assert mutual_knn(eset(a), eset(b), 6) == mutual_knn(eset(b), eset(a), 6)


def test_mutual_knn_rotation_invariant():
    rng = Rng(11)
    a = rng.normal(25 * 6).reshape(25, 6)
    b = rng.normal(25 * 6).reshape(25, 6)
    # random orthogonal rotation applied to one side
    q, _ = np.linalg.qr(rng.normal(36).reshape(6, 6))
    base = mutual_knn(eset(a), eset(b), 5)
    rotated = mutual_knn(eset(a), eset(b @ q.T), 5)
    assert rotated == pytest.approx(base, abs=1e-9)


def test_mutual_knn_chance_level_for_unpaired_sets():
    n, k, trials = 200, 10, 100
    scores = []
    for t in range(trials):
        rng = Rng(1000 + t)
        a = rng.normal(n * 8).reshape(n, 8)
        b = rng.normal(n * 8).reshape(n, 8)
        scores.append(mutual_knn(eset(a), eset(b), k))
    mean = float(np.mean(scores))
    p = k / (n - 1)
    # per-pair overlap is hypergeometric-ish; 3 sigma band on the trial mean
    se = float(np.std(scores)) / math.sqrt(trials)
    assert abs(mean - p) < 3 * max(se, 1e-4)


def test_mutual_knn_validations():
    a = eset(np.eye(4))
    b = eset(np.eye(3))
    with pytest.raises(ValueError, match="same size"):
        mutual_knn(a, b, 1)
    with pytest.raises(ValueError, match="k must be"):
        mutual_knn(a, a, 4)


def test_alignment_curve_validation():
    with pytest.raises(ValueError, match="per layer"):
        AlignmentCurve(layers=(0, 1), scores=(0.5,), k=3, batch=10)
    with pytest.raises(ValueError, match="\\[0, 1\\]"):
        AlignmentCurve(layers=(0,), scores=(1.5,), k=3, batch=10)


def _world_and_model():
    world = build_world(
        WorldSpec(
            latent_classes=6,
            latent_dim=3,
            modalities=(ModalitySpec("img", 5, 0.05),),
            vocab_size=12,
            text_len=3,
            seed=21,
        )
    )
    model = init_model(spec_for_world(world, enc_hidden=8, trunk_dims=(8, 6), init_seed=2))
    return world, model


def test_layerwise_identical_inputs_scores_one():
    world, model = _world_and_model()
    _, obs, _ = sample_arrays(world, 24, Rng(5))
    curve = layerwise_alignment(model, "img", obs["img"], "img", obs["img"], k=3)
    assert curve.scores == tuple([1.0] * model.spec.n_trunk_layers)
    assert curve.batch == 24 and curve.k == 3


def test_layerwise_shuffled_pairing_is_chance_level():
    world, model = _world_and_model()
    k, b = 5, 128
    _, obs, tokens = sample_arrays(world, b, Rng(6))
    perm = Rng(7).permutation(b)
    curve = layerwise_alignment(model, "text", tokens[perm], "img", obs["img"], k=k)
    chance = k / (b - 1)
    # shuffling destroys pairing; same-class collisions keep a small excess
    assert curve.final < 6 * chance


def test_layerwise_requires_batch_above_k():
    world, model = _world_and_model()
    _, obs, tokens = sample_arrays(world, 4, Rng(6))
    with pytest.raises(ValueError, match="exceed k"):
        layerwise_alignment(model, "text", tokens, "img", obs["img"], k=4)

"""Verification and identification metrics against brute-force oracles."""

import numpy as np
import pytest

from spherekd.data import (
    IdentificationProtocol,
    build_identification_protocol,
    build_verification_protocol,
    generate_dataset,
)
from spherekd.evaluate import (
    extract_embeddings,
    rank1_identification,
    verification_accuracy,
)
from spherekd.nets import ArchConfig, StagedNetwork
from spherekd.rng import substream


def tiny_dataset(seed=0, **kw):
    defaults = dict(
        num_train_classes=3,
        num_test_classes=4,
        samples_per_class=5,
        latent_dim=6,
        noise_sigma=0.3,
        image_size=8,
        num_distractors=10,
    )
    defaults.update(kw)
    return generate_dataset(seed, **defaults)


def random_unit_embeddings(n, d, seed):
    rng = np.random.default_rng(seed)
    e = rng.normal(size=(n, d))
    return e / np.linalg.norm(e, axis=1, keepdims=True)


# -- independent oracles ---------------------------------------------------------


def oracle_verification(embeddings, protocol):
    """Naive re-implementation: loop folds, candidates, and pairs.

    Similarities use the same elementwise multiply-sum as the production
    path; the sweep/cross-validation logic being checked is all loops.
    """
    sims = [
        float(np.sum(embeddings[a] * embeddings[b]))
        for a, b in zip(protocol.index_a, protocol.index_b)
    ]
    accs, thresholds = [], []
    for f in range(protocol.folds):
        train = [(s, bool(t)) for s, t, g in zip(sims, protocol.same, protocol.fold) if g != f]
        held = [(s, bool(t)) for s, t, g in zip(sims, protocol.same, protocol.fold) if g == f]
        uniq = sorted(set(s for s, _ in train))
        candidates = [-1.0] + [(u + v) / 2.0 for u, v in zip(uniq[:-1], uniq[1:])] + [1.0]
        best_t, best_acc = None, -1.0
        for t in candidates:
            acc = sum(1 for s, same in train if (s >= t) == same) / len(train)
            if acc > best_acc:  # strict: ties keep the earlier (smaller) threshold
                best_acc, best_t = acc, t
        thresholds.append(best_t)
        accs.append(sum(1 for s, same in held if (s >= best_t) == same) / len(held))
    return float(np.mean(accs)), float(np.mean(thresholds))


def oracle_rank1(embeddings, protocol):
    """Naive nearest-neighbor identification with tie-as-failure."""
    correct = 0
    for p_idx, p_cls in zip(protocol.probe_indices, protocol.probe_classes):
        best_sims = [float(np.dot(embeddings[p_idx], embeddings[g])) for g in protocol.gallery_indices]
        best = max(best_sims)
        winners = [i for i, s in enumerate(best_sims) if s == best]
        if len(winners) != 1:
            continue
        if int(protocol.gallery_classes[winners[0]]) == int(p_cls):
            correct += 1
    return correct / len(protocol.probe_indices)


class TestVerificationAccuracy:
    def test_perfectly_separable(self):
        ds = tiny_dataset(num_test_classes=2, samples_per_class=6)
        prot = build_verification_protocol(ds, pairs_per_side=8, folds=2, seed=0)
        e = np.zeros((ds.num_samples, 4))
        classes = sorted(ds.test_classes.tolist())
        for i in ds.test_indices:
            e[i] = [1.0, 0, 0, 0] if ds.labels[i] == classes[0] else [-1.0, 0, 0, 0]
        acc, threshold = verification_accuracy(e, prot)
        assert acc == 1.0
        assert -1.0 < threshold < 1.0

    def test_identical_embeddings_give_half(self):
        ds = tiny_dataset()
        prot = build_verification_protocol(ds, pairs_per_side=10, folds=2, seed=1)
        e = np.tile(random_unit_embeddings(1, 8, 0), (ds.num_samples, 1))
        acc, _ = verification_accuracy(e, prot)
        assert acc == pytest.approx(0.5, abs=1e-12)

    def test_matches_oracle_over_20_seeds(self):
        ds = tiny_dataset()
        for seed in range(20):
            prot = build_verification_protocol(ds, pairs_per_side=20, folds=2, seed=seed)
            assert prot.num_pairs <= 50
            e = random_unit_embeddings(ds.num_samples, 8, seed + 100)
            got = verification_accuracy(e, prot)
            want = oracle_verification(e, prot)
            assert got[0] == want[0]
            assert got[1] == want[1]

    def test_random_embeddings_near_chance(self):
        ds = tiny_dataset(num_test_classes=6, samples_per_class=8)
        accs = []
        for seed in range(5):
            prot = build_verification_protocol(ds, pairs_per_side=60, folds=3, seed=seed)
            e = random_unit_embeddings(ds.num_samples, 16, seed)
            accs.append(verification_accuracy(e, prot)[0])
        assert abs(float(np.mean(accs)) - 0.5) <= 0.1

    def test_accuracy_in_unit_interval(self):
        ds = tiny_dataset()
        prot = build_verification_protocol(ds, pairs_per_side=10, folds=2, seed=2)
        e = random_unit_embeddings(ds.num_samples, 8, 3)
        acc, _ = verification_accuracy(e, prot)
        assert 0.0 <= acc <= 1.0

    def test_missing_embedding_is_index_error(self):
        ds = tiny_dataset()
        prot = build_verification_protocol(ds, pairs_per_side=10, folds=2, seed=3)
        too_few = random_unit_embeddings(3, 8, 4)  # protocol indexes beyond row 3
        with pytest.raises(IndexError):
            verification_accuracy(too_few, prot)


class TestRank1Identification:
    def test_exact_match_with_orthogonal_distractors(self):
        ds = tiny_dataset(num_test_classes=4, samples_per_class=3, num_distractors=5)
        prot = build_identification_protocol(ds, seed=0)
        dim = 4 + 5
        e = np.zeros((ds.num_samples, dim))
        axis = {int(c): i for i, c in enumerate(sorted(ds.test_classes.tolist()))}
        for i in ds.test_indices:
            e[i, axis[int(ds.labels[i])]] = 1.0
        for k, i in enumerate(ds.distractor_indices):
            e[i, 4 + k] = 1.0
        assert rank1_identification(e, prot) == 1.0

    def test_identical_embeddings_all_fail_by_tie(self):
        ds = tiny_dataset()
        prot = build_identification_protocol(ds, seed=1)
        e = np.tile(random_unit_embeddings(1, 6, 0), (ds.num_samples, 1))
        assert rank1_identification(e, prot) == 0.0

    def test_matches_oracle_over_20_seeds(self):
        ds = tiny_dataset(num_test_classes=5, samples_per_class=4, num_distractors=10)
        prot = build_identification_protocol(ds, seed=2)
        assert len(prot.gallery_indices) <= 20
        for seed in range(20):
            e = random_unit_embeddings(ds.num_samples, 8, seed + 500)
            assert rank1_identification(e, prot) == oracle_rank1(e, prot)

    def test_monotone_under_added_distractors(self):
        ds = tiny_dataset(num_test_classes=5, samples_per_class=4, num_distractors=12)
        prot = build_identification_protocol(ds, seed=3)
        e = random_unit_embeddings(ds.num_samples, 8, 9)
        # same embeddings, gallery grown distractor by distractor
        distractor_mask = np.array(
            [int(c) not in set(ds.test_classes.tolist()) for c in prot.gallery_classes]
        )
        base_positions = np.nonzero(~distractor_mask)[0]
        extra_positions = np.nonzero(distractor_mask)[0]
        prev = None
        for k in range(0, len(extra_positions) + 1, 3):
            keep = np.concatenate([base_positions, extra_positions[:k]])
            sub = IdentificationProtocol(
                gallery_indices=prot.gallery_indices[keep],
                gallery_classes=prot.gallery_classes[keep],
                probe_indices=prot.probe_indices,
                probe_classes=prot.probe_classes,
            )
            rate = rank1_identification(e, sub)
            if prev is not None:
                assert rate <= prev
            prev = rate


class TestExtractEmbeddings:
    ARCH = ArchConfig(
        input_size=8, in_channels=1, num_stages=2, teacher_channels=(4, 6),
        student_channels=(2, 3), block_depth=1, embedding_dim=4,
    )

    def _net(self):
        return StagedNetwork(self.ARCH, self.ARCH.teacher_channels, substream(0, "t"))

    def test_unit_norms(self):
        net = self._net()
        ds = tiny_dataset()
        table = extract_embeddings(net, ds.images)
        norms = np.linalg.norm(table, axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-10)

    def test_repeated_call_identical(self):
        net = self._net()
        ds = tiny_dataset()
        t1 = extract_embeddings(net, ds.images)
        t2 = extract_embeddings(net, ds.images)
        assert np.array_equal(t1, t2)

    def test_batch_size_independence(self):
        net = self._net()
        ds = tiny_dataset()
        t1 = extract_embeddings(net, ds.images, batch_size=1)
        t32 = extract_embeddings(net, ds.images, batch_size=32)
        np.testing.assert_allclose(t1, t32, atol=1e-9)

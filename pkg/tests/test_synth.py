import itertools

import numpy as np
import pytest
from scipy import stats

from duet.attrspace import ClassAttributeMatrix, attribute_set_of, co_occurrence, freq
from duet.sampling import SeededRng, acl_candidates
from duet.synth import (_draw_class, CorruptionError, GenerationError, GeneratorConfig, base_patterns,
                        dataset_hash, gen_classes, generate, noise_images, read_dataset,
                        regions, render_image, write_dataset)


def small(**kw):
    base = dict(n_classes=10, images_per_class=5, image_size=8, patch_size=4, channels=1)
    base.update(kw)
    return GeneratorConfig(**base)


def prompt_choices(matrix, config):
    k = config.attributes_per_prompt
    return [tuple(int(np.flatnonzero(row[p * k:(p + 1) * k])[0]) for p in range(config.n_prompts))
            for row in matrix.values]


@pytest.mark.parametrize("seed", range(5))
def test_categorical_structure_and_split(seed):
    cfg = GeneratorConfig(seed=seed)
    space, matrix, split = gen_classes(cfg)
    assert space.n_attributes == cfg.n_prompts * cfg.attributes_per_prompt
    k = cfg.attributes_per_prompt
    for row in matrix.values:
        assert [row[p * k:(p + 1) * k].sum() for p in range(cfg.n_prompts)] == [1.0] * cfg.n_prompts
    vecs = prompt_choices(matrix, cfg)
    assert len(set(vecs)) == len(vecs)
    assert len(split.unseen) == 4 and len(split.seen) == 16
    seen_attrs = set().union(*(attribute_set_of(c, matrix) for c in split.seen))
    for u in split.unseen:
        held = attribute_set_of(u, matrix)
        assert held <= seen_attrs
        assert all(vecs[u] != vecs[s] for s in split.seen)
        novel = [(p, q) for p, q in itertools.combinations(range(cfg.n_prompts), 2)
                 if not any(vecs[s][p] == vecs[u][p] and vecs[s][q] == vecs[u][q] for s in split.seen)]
        assert novel


def test_skew_zero_is_uniform():
    cfg = GeneratorConfig(skew=0.0, seed=3)
    rng = SeededRng(3, 99)
    draws = np.array([_draw_class(cfg, rng) for _ in range(5000)])
    for p in range(cfg.n_prompts):
        counts = np.bincount(draws[:, p], minlength=4)
        assert stats.chisquare(counts).pvalue > 0.001


def test_skew_two_follows_zipf_ranking():
    cfg = GeneratorConfig(n_classes=20, n_prompts=6, attributes_per_prompt=4, skew=2.0, seed=1)
    _, matrix, _ = gen_classes(cfg)
    by_rank = [sum(freq(p * 4 + k, matrix) for p in range(6)) for k in range(4)]
    assert by_rank == sorted(by_rank, reverse=True)


def diagonal_r(coupling, seed):
    # prompts 0 and 1 are the coupled pair; attribute k of one pairs with k of the other
    _, matrix, _ = gen_classes(GeneratorConfig(coupling=coupling, skew=0.0, seed=seed))
    return [co_occurrence(4 + k, k, matrix) for k in range(4)]


@pytest.mark.parametrize("seed", range(3))
def test_coupling_drives_co_occurrence_up(seed):
    free, tied = diagonal_r(0.0, seed), diagonal_r(0.8, seed)
    assert max(free) <= 1.0
    assert all(r >= 1.5 for r in tied)
    assert np.mean(np.minimum(tied, 20.0)) > 3 * np.mean(free)


def test_impossible_sizes_raise_with_diagnostic():
    with pytest.raises(GenerationError, match="combinations"):
        gen_classes(GeneratorConfig(n_classes=20, n_prompts=2, attributes_per_prompt=3))


def test_acl_pools_nonempty_between_differing_classes():
    cfg = GeneratorConfig()
    space, matrix, split = gen_classes(cfg)
    vecs = prompt_choices(matrix, cfg)
    for c in split.seen:
        for a in attribute_set_of(c, matrix):
            p = space.attributes[a].prompt_id
            _, neg = acl_candidates(c, a, matrix, split, space)
            differs = any(vecs[c2][p] != vecs[c][p] for c2 in split.seen if c2 != c)
            assert bool(neg) == differs


def test_zero_noise_images_identical_within_class():
    ds = generate(small(noise=0.0))
    assert all(np.array_equal(ds.images[c, 0], ds.images[c, i])
               for c in range(10) for i in range(5))


def test_locality_of_single_prompt_difference():
    cfg = small(noise=0.0, n_classes=3, n_prompts=2, attributes_per_prompt=2, unseen_fraction=0.0)
    m = ClassAttributeMatrix(("a", "b"), np.array([[1, 0, 1, 0], [1, 0, 0, 1]], dtype=float))
    x, y = (render_image(c, 0, m, cfg) for c in (0, 1))
    rs, cs = regions(cfg)[1]
    outside = np.ones(x.shape[:2], bool)
    outside[rs, cs] = False
    assert np.array_equal(x[outside], y[outside]) and not np.array_equal(x[rs, cs], y[rs, cs])


def test_render_is_reproducible_from_keys():
    cfg = small(seed=4)
    _, matrix, _ = gen_classes(cfg)
    a = render_image(3, 2, matrix, cfg)
    b = render_image(3, 2, matrix, cfg, base_patterns(cfg))
    assert a.tobytes() == b.tobytes()
    assert a.min() >= 0 and a.max() <= 1
    assert not np.array_equal(a, render_image(3, 1, matrix, cfg))


def test_splits_of_image_indices():
    ds = generate(small())
    for c in ds.split.seen:
        assert set(ds.train_indices(c)).isdisjoint(ds.test_indices(c))
    for c in ds.split.unseen:
        assert len(ds.train_indices(c)) == 0 and len(ds.test_indices(c)) == 5
    assert all(c in ds.split.seen for c, _ in ds.train_pairs())


def test_round_trip(tmp_path):
    ds = generate(small())
    write_dataset(ds, tmp_path / "d")
    back = read_dataset(tmp_path / "d")
    assert back.images.tobytes() == ds.images.tobytes()
    np.testing.assert_array_equal(back.matrix.values, ds.matrix.values)
    assert back.split == ds.split and back.config == ds.config
    assert back.space.n_attributes == ds.space.n_attributes
    write_dataset(back, tmp_path / "e")
    assert dataset_hash(tmp_path / "d") == dataset_hash(tmp_path / "e")


def test_checksum_mismatch(tmp_path):
    write_dataset(generate(small()), tmp_path)
    blob = bytearray((tmp_path / "images.bin").read_bytes())
    blob[0] ^= 1
    (tmp_path / "images.bin").write_bytes(bytes(blob))
    with pytest.raises(CorruptionError):
        read_dataset(tmp_path)


def test_empty_path():
    with pytest.raises(IOError):
        read_dataset("")
    with pytest.raises(IOError):
        write_dataset(generate(small()), "")


def test_noise_images_have_no_class_content():
    cfg = small()
    x = noise_images(4, cfg, seed=0)
    assert x.shape == (4, 8, 8, 1) and x.min() >= 0 and x.max() <= 1
    assert np.array_equal(x, noise_images(4, cfg, seed=0))

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddlab.synth import EASY, SynthConfig, generate, load_dataset, save_dataset, split_train_eval


def intra_identity_cosine(ds, domain):
    m = ds.domains == domain
    f, ids = ds.features[m], ds.identities[m]
    sims = []
    for i in np.unique(ids):
        x = f[ids == i]
        g = x @ x.T
        sims.append(g[np.triu_indices(len(x), 1)])
    return float(np.concatenate(sims).mean())


SMALL = SynthConfig(n_identities=20, samples_per_identity=3, dim=8, hard_sigmas=(0.2,), hard_ranks=(4,), seed=3)


def test_counts_and_unit_rows():
    protos, ds = generate(SMALL)
    assert protos.shape == (20, 8)
    assert len(ds) == 20 * 3 * 2
    assert np.all(np.isfinite(ds.features))
    np.testing.assert_allclose(np.linalg.norm(ds.features, axis=1), 1.0, atol=1e-12)
    assert ds.domain_names == ["easy", "hard-1"]
    assert ds[0].domain == EASY and ds[0].identity == 0


def test_same_seed_bitwise_identical():
    _, a = generate(SMALL)
    _, b = generate(SMALL)
    assert a.features.tobytes() == b.features.tobytes()
    assert a.identities.tobytes() == b.identities.tobytes()


def test_different_seed_differs():
    _, a = generate(SMALL)
    _, b = generate(SynthConfig(**{**SMALL.__dict__, "seed": 4}))
    assert not np.array_equal(a.features, b.features)


def test_zero_easy_noise_reproduces_prototypes():
    cfg = SynthConfig(n_identities=10, samples_per_identity=4, dim=8, easy_sigma=0.0, hard_sigmas=(0.1,), hard_ranks=(3,))
    protos, ds = generate(cfg)
    easy = ds.domains == EASY
    np.testing.assert_allclose(ds.features[easy], protos[ds.identities[easy]], atol=1e-15)
    assert abs(intra_identity_cosine(ds, EASY) - 1.0) < 1e-12


def test_easy_tighter_than_hard():
    cfg = SynthConfig(n_identities=50, samples_per_identity=5, dim=32, easy_sigma=0.05, hard_sigmas=(0.4,), hard_ranks=(8,))
    _, ds = generate(cfg)
    assert intra_identity_cosine(ds, "easy") > intra_identity_cosine(ds, "hard-1")


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.1, 0.5), st.floats(0.05, 0.5))
def test_severity_monotone_in_noise(seed, s1, gap):
    # equal rank means a shared projection and noise draw; only the noise scale differs
    cfg = SynthConfig(n_identities=60, samples_per_identity=4, dim=16, easy_sigma=0.01,
                      hard_sigmas=(s1, s1 + gap), hard_ranks=(8, 8), seed=seed)
    _, ds = generate(cfg)
    assert intra_identity_cosine(ds, "hard-1") >= intra_identity_cosine(ds, "hard-2")


@pytest.mark.parametrize(
    "kw",
    [
        {"easy_sigma": 0.2, "hard_sigmas": (0.1,), "hard_ranks": (4,)},
        {"hard_sigmas": (0.2,), "hard_ranks": (8,)},
        {"hard_sigmas": (0.2,), "hard_ranks": (0,)},
        {"hard_sigmas": (0.2, 0.3), "hard_ranks": (4,)},
        {"n_identities": 0, "hard_sigmas": (0.2,), "hard_ranks": (4,)},
    ],
)
def test_invalid_configs(kw):
    with pytest.raises(ValueError):
        generate(SynthConfig(dim=8, **kw))


def test_split_half():
    _, ds = generate(SynthConfig(n_identities=100, samples_per_identity=2, dim=8, hard_sigmas=(0.2,), hard_ranks=(4,)))
    tr, ev = split_train_eval(ds, 0.5, 0)
    assert len(np.unique(tr.identities)) == 50
    assert len(np.unique(ev.identities)) == 50


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.05, 0.95))
def test_split_disjoint_and_complete(seed, fraction):
    _, ds = generate(SMALL)
    tr, ev = split_train_eval(ds, fraction, seed)
    assert not set(tr.identities) & set(ev.identities)
    assert len(tr) + len(ev) == len(ds)
    tr2, _ = split_train_eval(ds, fraction, seed)
    assert tr.identities.tobytes() == tr2.identities.tobytes()


def test_split_errors():
    _, ds = generate(SMALL)
    for f in (0.0, 1.0):
        with pytest.raises(ValueError):
            split_train_eval(ds, f, 0)
    with pytest.raises(ValueError):
        split_train_eval(ds.subset(ds.identities == 0), 0.5, 0)


def test_dataset_file_roundtrip(tmp_path):
    _, ds = generate(SMALL)
    path = tmp_path / "d.csv"
    save_dataset(ds, path)
    assert path.read_text().splitlines()[0].startswith("identity,domain,f0,")
    back = load_dataset(path)
    assert back.features.tobytes() == ds.features.tobytes()
    assert list(back.domains) == list(ds.domains)
    assert json.loads((tmp_path / "d.config.json").read_text())["seed"] == 3
    assert back.config == json.loads(json.dumps(ds.config))

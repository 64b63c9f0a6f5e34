import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from cgnn.graph import CVS_COMPONENTS, PGS_FACTORS
from cgnn.worlds import (
    PGS_CATEGORIES,
    WorldConfig,
    dumps_dataset,
    generate_world,
    load_pgs_rules,
    loads_dataset,
    noise_for_probe_accuracy,
    oracle_labels,
    pgs_grade,
)

BENIGN = {"adhesion": "none", "distention": "normal", "hyperemic": "no", "intra_hepatic": "no", "necrotic": "no"}


def onsets(*flags):
    return {"frames": 1, "onsets": {c: (0 if f else None) for c, f in zip(CVS_COMPONENTS, flags)}}


def test_cvs_and_rule():
    assert oracle_labels(onsets(1, 1, 1, 1, 1), "cvs")["cvs"] == [1]
    assert oracle_labels(onsets(1, 1, 1, 1, 0), "cvs")["cvs"] == [0]
    assert oracle_labels(onsets(0, 0, 0, 0, 0), "cvs")["cvs"] == [0]


def test_generated_cvs_labels_follow_components():
    for r in generate_world(WorldConfig("cvs", n_sequences=60, frames=10, seed=3)):
        comps = np.array([r.labels[c] for c in CVS_COMPONENTS])
        assert r.labels["cvs"] == comps.all(axis=0).astype(int).tolist()
        # components never switch off once on
        assert np.all(np.diff(comps, axis=1) >= 0)


def test_cvs_final_frame_split_is_balanced():
    positives = []
    for seed in range(10):
        recs = generate_world(WorldConfig("cvs", n_sequences=100, seed=seed))
        positives.append(sum(r.labels["cvs"][-1] for r in recs))
    assert abs(np.mean(positives) - 50) <= 10
    assert all(abs(p - 50) <= 20 for p in positives)


@pytest.mark.parametrize(
    "changes, grade",
    [
        ({}, 1),
        ({"necrotic": "yes"}, 5),
        ({"necrotic": "yes", "adhesion": "neck"}, 5),
        ({"adhesion": "buried"}, 5),
        ({"adhesion": "majority"}, 4),
        ({"intra_hepatic": "yes"}, 4),
        ({"adhesion": "body"}, 3),
        ({"distention": "distended"}, 3),
        ({"distention": "shrivelled"}, 3),
        ({"hyperemic": "yes"}, 3),
        ({"adhesion": "neck"}, 2),
        ({"adhesion": "neck", "hyperemic": "yes"}, 3),
        ({"adhesion": "majority", "intra_hepatic": "yes"}, 4),
    ],
)
def test_rule_table_rows(changes, grade):
    assert pgs_grade({**BENIGN, **changes}) == grade


def test_rule_table_is_complete_and_monotone():
    rules = load_pgs_rules()
    assert rules[-1] == (1, {})
    grades = [g for g, _ in rules]
    assert grades == sorted(grades, reverse=True)
    for _, cond in rules:
        for factor, allowed in cond.items():
            assert set(allowed) <= set(PGS_CATEGORIES[factor])


def test_pgs_world_covers_every_grade_and_labels_match_latents():
    recs = generate_world(WorldConfig("pgs", n_sequences=200, seed=0))
    assert {r.labels["pgs"] for r in recs} == {1, 2, 3, 4, 5}
    for r in recs:
        assert r.labels == oracle_labels(r.latents, "pgs")
        assert r.frames.shape == (8, 24)


def test_cvs_labels_match_latents():
    for r in generate_world(WorldConfig("cvs", n_sequences=30, seed=9)):
        assert r.labels == oracle_labels(r.latents, "cvs")


@pytest.mark.parametrize("kind", ["cvs", "pgs"])
def test_same_seed_same_bytes(kind):
    a = dumps_dataset(generate_world(WorldConfig(kind, n_sequences=20, seed=4)))
    b = dumps_dataset(generate_world(WorldConfig(kind, n_sequences=20, seed=4)))
    c = dumps_dataset(generate_world(WorldConfig(kind, n_sequences=20, seed=5)))
    assert a == b and a != c


def test_prefix_of_a_larger_world_is_the_smaller_world():
    small = generate_world(WorldConfig("cvs", n_sequences=5, seed=2))
    large = generate_world(WorldConfig("cvs", n_sequences=50, seed=2))
    assert dumps_dataset(small) == dumps_dataset(large[:5])


@pytest.mark.parametrize("kind", ["cvs", "pgs"])
def test_dataset_text_round_trip(kind):
    recs = generate_world(WorldConfig(kind, n_sequences=10, seed=1))
    text = dumps_dataset(recs, {"note": "x"})
    back, header = loads_dataset(text)
    assert header["note"] == "x"
    assert all(a.frames.tobytes() == b.frames.tobytes() and a.labels == b.labels for a, b in zip(recs, back))
    assert dumps_dataset(back, {"note": "x"}) == text


def test_bad_dataset_files():
    with pytest.raises(ValueError, match="header"):
        loads_dataset('{"id": 1}\n')
    with pytest.raises(ValueError, match="line 2"):
        loads_dataset('{"format": "cgnn-dataset", "format_version": 1}\n{"frames": [[1]]}\n')


def _probe_accuracy(kind, noise):
    cfg = WorldConfig(kind, n_sequences=300, frames=8, noise=noise, seed=7)
    recs = generate_world(cfg)
    X = np.concatenate([r.frames for r in recs])
    B = cfg.block_dim
    names = CVS_COMPONENTS if kind == "cvs" else PGS_FACTORS
    accs = []
    for c, name in enumerate(names):
        y = np.concatenate([r.label_track(name) for r in recs])
        block = X[:, c * B : (c + 1) * B]
        half = len(y) // 2
        clf = LogisticRegression(max_iter=1000).fit(block[:half], y[:half])
        accs.append(clf.score(block[half:], y[half:]))
    return accs


@pytest.mark.parametrize("kind", ["cvs", "pgs"])
def test_noiseless_features_are_linearly_readable(kind):
    assert min(_probe_accuracy(kind, 0.0)) >= 0.99


def test_tuned_noise_gives_target_probe_accuracy():
    sigma = noise_for_probe_accuracy(0.85)
    assert sigma == pytest.approx(0.9648, abs=1e-4)
    accs = _probe_accuracy("cvs", sigma)
    assert all(abs(a - 0.85) <= 0.03 for a in accs)


def test_config_validation_and_defaults(tmp_path):
    assert WorldConfig("cvs").frames == 50 and WorldConfig("pgs").frames == 8
    assert WorldConfig("cvs").p_active ** 5 == pytest.approx(0.5)
    with pytest.raises(ValueError):
        WorldConfig("xyz")
    with pytest.raises(ValueError):
        WorldConfig("cvs", noise=-1)
    path = tmp_path / "w.yaml"
    path.write_text("kind: pgs\nn_sequences: 3\n")
    assert WorldConfig.from_file(path).n_sequences == 3
    path.write_text("kind: pgs\nbogus: 3\n")
    with pytest.raises(ValueError, match="bogus"):
        WorldConfig.from_file(path)

"""Smoke test for the mftnet_py extension.

Build and install it first:

    cd crates/python && maturin build --release -o dist && pip install dist/*.whl

then run `python3 python/smoke_test.py`.
"""

import os
import tempfile

import mftnet_py as m


def main():
    counts = m.parameter_counts()
    assert counts == {
        "eegnet-baseline": 3274,
        "no-transformer": 9497,
        "no-multiscale": 9715,
        "full": 16096,
    }, counts

    trials, plants = m.synth(n_per_class=16, channels=8, samples=256, seed=3, snr=4.0)
    assert len(trials) == 32 and trials.channels == 8 and trials.samples == 256
    assert plants == {"left": [2], "right": [6]}, plants

    model = m.Model(channels=8, samples=256, variant="full", seed=3)
    assert model.parameter_count()["non_trainable"] > 0
    history = model.train(trials, epochs=25, batch_size=16, seed=3)
    assert len(history["epochs"]) == 25
    acc = model.evaluate(trials)["accuracy"]
    assert acc >= 0.9, f"training accuracy {acc}"

    probs = model.predict_proba(trials)
    assert all(abs(sum(row) - 1.0) < 1e-5 for row in probs)

    scores = model.channel_scores(trials)
    assert sorted(scores["ranking"]) == list(range(8))
    fractions = [i / 10 for i in range(11)]
    most = model.deletion_test(trials, scores["scores"], fractions, "most-important")
    least = model.deletion_test(trials, scores["scores"], fractions, "least-important")
    assert most["mean_confidence"][0] == least["mean_confidence"][0]
    print(f"plants ranked {[scores['ranking'].index(c) for c in (2, 6)]}, "
          f"deletion AUC most {most['auc']:.3f} vs least {least['auc']:.3f}")

    with tempfile.TemporaryDirectory() as d:
        trials.save(os.path.join(d, "t.etf"))
        again = m.TrialSet.load(os.path.join(d, "t.etf"))
        assert again.labels == trials.labels and again.trial(5) == trials.trial(5)
        model.save(os.path.join(d, "m.mftw"))
        restored = m.Model.load(os.path.join(d, "m.mftw"))
        assert restored.predict_proba(trials) == probs

    try:
        m.Model(variant="wide")
    except m.MftnetError as e:
        assert "unknown variant" in str(e)
    else:
        raise AssertionError("bad variant accepted")

    checks = m.gradcheck(seed=42)
    failed = [c["name"] for c in checks if c["max_rel_error"] > c["tolerance"]]
    assert not failed, failed

    print(f"ok: {model!r}, accuracy {acc:.2f}, {len(checks)} gradient checks")


if __name__ == "__main__":
    main()

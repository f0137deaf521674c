"""Smoke test of the lakn_py bindings on a small planted model.

Build and install the extension first, e.g.
    cd crates/python && maturin build --release -o dist && pip install dist/*.whl
"""

import json
import os
import sys
import tempfile

import lakn_py as lk


def small_config():
    cfg = json.loads(lk.Config().to_json())
    cfg["seed"] = 4
    cfg["corpus"] = {"synthetic": {**cfg["corpus"]["synthetic"], "n_facts": 14, "n_languages": 3, "n_paraphrases": 4}}
    cfg["model"].update({"n_layers": 2, "d_model": 32, "d_ffn": 64})
    cfg["plant"].update({"d_model": 96, "d_ffn": 64})
    cfg["train"].update({"epochs": 15, "lr": 3e-3})
    cfg["n_facts"] = 4
    return lk.Config.from_json(json.dumps(cfg))


def main():
    cfg = small_config()
    cfg.validate()
    corpus = lk.Corpus.from_config(cfg)
    assert len(corpus) == 14 * 3 * 4, len(corpus)
    assert corpus.languages == ["L0", "L1", "L2"], corpus.languages
    facts = cfg.target_facts(corpus)
    assert len(facts) == 4

    model, truth = lk.Model.plant(cfg, corpus)
    assert model.accuracy(corpus) > 90.0
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.ckpt")
        model.save(path)
        assert lk.Model.load(path).hash() == model.hash()

    sets = lk.localize(cfg, model, corpus, facts)
    assert [s.fact_id for s in sets] == facts
    recall = lk.recovery(sets, truth, 5)
    print(f"planted recall@5 {recall:.3f}, set sizes {[len(s) for s in sets]}")
    assert recall >= 0.5
    assert lk.LaknSet.from_json(sets[0].to_json()).neurons == sets[0].neurons

    random = lk.random_like(model, sets, 0)
    assert [len(r) for r in random] == [len(s) for s in sets]
    lakn = lk.manipulate(model, corpus, sets, "suppress")
    rand = lk.manipulate(model, corpus, random, "suppress")
    mean = lambda ds: sum(d["delta"] for d in ds) / len(ds)
    print(f"suppress dP: lakn {mean(lakn):.3f}, random {mean(rand):.3f}")
    assert mean(lakn) < mean(rand)

    erased = lk.erase(model, sets[0])
    assert erased.hash() != model.hash()
    before = model.answer_probabilities(corpus, facts[0])
    after = erased.answer_probabilities(corpus, facts[0])
    assert sum(after) < sum(before)

    try:
        lk.Config.from_json('{"colour": 1}')
    except ValueError as e:
        assert "colour" in str(e)
    else:
        raise AssertionError("unknown field accepted")

    trained, report = lk.Model.train(cfg, corpus)
    assert report["epochs_run"] == 15
    print(f"trained accuracy {trained.accuracy(corpus):.1f}")
    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())

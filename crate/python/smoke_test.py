#!/usr/bin/env python3
"""End-to-end smoke test for the adsoup_py extension module.

Builds a synthetic corpus, drives the full pipeline through the Python API
(encoder training, theme grounding, the stance sweep, model soups, metrics,
analytics), round-trips every file format, and finally runs the staged
pipeline against a config file. Prints one OK line per section.

Run `cargo build -p adsoup-py` (or `--release`) first, then:

    python3 python/smoke_test.py
"""

import json
import math
import shutil
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def load_module():
    candidates = [
        REPO / "target" / "release" / "libadsoup_py.so",
        REPO / "target" / "debug" / "libadsoup_py.so",
    ]
    built = [p for p in candidates if p.exists()]
    if not built:
        sys.exit("libadsoup_py.so not found — run `cargo build -p adsoup-py` first")
    newest = max(built, key=lambda p: p.stat().st_mtime)
    stage = Path(tempfile.mkdtemp(prefix="adsoup_py_"))
    shutil.copy2(newest, stage / "adsoup_py.so")
    sys.path.insert(0, str(stage))
    import adsoup_py

    return adsoup_py


m = load_module()


def ok(section, detail=""):
    print(f"OK {section}" + (f": {detail}" if detail else ""))


def close(a, b, tol=1e-9):
    assert abs(a - b) <= tol, f"{a} vs {b} (tol {tol})"


# -- corpus ------------------------------------------------------------------

ads, registry, annotations = m.synth_corpus(
    n_entities=12, ads_per_entity=10, unknown_entities=1, seed=11
)
assert len(ads) == 120 and len(registry) == 12
assert all(isinstance(a.spend_mid(), float) for a in ads)
assert ads[0].problem() is None

kept = m.filter_keywords(ads, m.default_keywords())
assert len(kept) == len(ads), "synthetic ads all carry topic keywords"

labeled, unlabeled = m.propagate_stance(ads, registry)
assert len(labeled) + len(unlabeled) == len(ads) and unlabeled
assert {l.stance for l in labeled} <= set(m.STANCE_LABELS)

split = m.split_by_entity(labeled, seed=13, test_frac=0.2, val_frac=0.2)
counts = split.counts()
assert sum(counts.values()) == len({l.ad.funding_entity for l in labeled})
train = split.ads_in(labeled, "train")
val = split.ads_in(labeled, "val")
test = split.ads_in(labeled, "test")
assert len(train) + len(val) + len(test) == len(labeled)
entity_splits = {split.split_of(l.ad.funding_entity) for l in labeled}
assert entity_splits == {"train", "val", "test"}
ok("corpus", f"{len(labeled)} labeled / {len(unlabeled)} unlabeled, splits {counts}")

# -- encoder -----------------------------------------------------------------

assert m.tokenize("Clean Energy!") == ["clean", "energy"]
texts = [a.searchable_text() for a in ads]
bank = m.ThemeBank.shipped()
vocab = m.Vocabulary.build(texts, 2048, bank.id_tokens())
assert len(vocab) > 100
assert all(vocab.contains(t) for t in bank.id_tokens())

encoder, encoder_ckpt, losses = m.train_encoder(
    ads, vocab, dim=16, epochs=2, batch_size=16, seed=42
)
assert encoder.dim == 16 and len(losses) == 2
vec = encoder.encode(ads[0].body)
close(sum(x * x for x in vec), 1.0, 1e-9)
close(m.cosine(vec, vec), 1.0, 1e-12)
ok("encoder", f"dim {encoder.dim}, epoch losses {[round(l, 3) for l in losses]}")

# -- themes ------------------------------------------------------------------

assignments = m.assign_themes(ads, encoder, bank)
assert len(assignments) == len(ads)
assert all(a["theme_id"] in set(bank.ids()) for a in assignments)
report = m.eval_themes(assignments, annotations, bank)
assert 0.0 <= report["accuracy"] <= 1.0 and report["n_annotated"] == len(annotations)
ok("themes", f"assignment accuracy {report['accuracy']:.3f} on {report['n_annotated']} gold ads")

# -- stance sweep ------------------------------------------------------------

ex_train = m.make_examples(train, vocab, assignments)
ex_val = m.make_examples(val, vocab, assignments)
ex_test = m.make_examples(test, vocab, assignments)
assert len(ex_train) == len(train) and set(ex_val.labels()) <= set(m.STANCE_LABELS)

grid = m.default_grid(1234)[:3]
for point in grid:
    point.update(epochs=2, batch_size=16)
checkpoints = m.sweep(encoder_ckpt, ex_train, ex_val, grid)
assert len(checkpoints) == 3
assert len({c.shared_init_id for c in checkpoints}) == 1
vals = [c.val_accuracy for c in checkpoints]
assert all(v is not None for v in vals)

single = m.finetune(encoder_ckpt, ex_train, ex_val, grid[0])
assert single.val_accuracy == checkpoints[0].val_accuracy
ok("sweep", f"3 checkpoints, val accuracies {[round(v, 3) for v in vals]}")

# -- soups -------------------------------------------------------------------

uniform, ingredients = m.uniform_soup(checkpoints)
assert ingredients == [0, 1, 2]
flat = [c.to_vector() for c in checkpoints]
mean0 = sum(f[0] for f in flat) / len(flat)
close(uniform.to_vector()[0], mean0, 1e-12)

greedy, kept, trace = m.greedy_soup(checkpoints, ex_val)
assert kept and len(trace) == len(checkpoints)
assert greedy.val_accuracy >= max(vals) - 1e-12
preds = m.predict_stance(greedy, ex_test)
for p in preds:
    close(sum(p["probabilities"]), 1.0, 1e-9)
test_acc = m.evaluate_accuracy(greedy, ex_test)
ok("soups", f"greedy kept {kept}, val {greedy.val_accuracy:.3f}, test {test_acc:.3f}")

# -- metrics -----------------------------------------------------------------

pred_labels = [p["label"] for p in preds]
gold_labels = ex_test.labels()
rep = m.classification_report(pred_labels, gold_labels, list(m.STANCE_LABELS))
close(rep["accuracy"], m.accuracy(pred_labels, gold_labels), 1e-12)
assert set(rep["per_class"]) == set(m.STANCE_LABELS)

chi = m.chi_square([[20.0, 5.0], [10.0, 15.0]], ["a", "b"], ["x", "y"])
assert chi["df"] == 1 and 0.0 < chi["p_value"] < 0.05
close(m.chi2_sf(3.0, 2), math.exp(-1.5), 1e-10)
independent = m.chi_square([[10.0, 20.0], [20.0, 40.0]], ["a", "b"], ["x", "y"])
assert independent["statistic"] == 0.0 and independent["p_value"] == 1.0
ok("metrics", f"report accuracy {rep['accuracy']:.3f}, chi2 p {chi['p_value']:.4f}")

# -- analytics ---------------------------------------------------------------

all_preds = m.predict_stance(greedy, m.make_examples(labeled, vocab, assignments))
correct = m.filter_correct(labeled, all_preds)
assert 0 < len(correct) <= len(labeled)
theme_map = {a["ad_id"]: a["theme_id"] for a in assignments}
dist = m.theme_distribution(correct, theme_map, "spend_mid")
assert dist["rows"] and all(0.0 <= r["share"] <= 1.0 for r in dist["rows"])
funders = m.top_funders(correct, 3, "ad_count")
assert funders
table = m.stance_contingency(labeled, "gender", "ad_count")
chi = m.chi_square(table["counts"], table["row_labels"], table["col_labels"])
ok("analytics", f"{len(correct)} correct ads, gender×stance p {chi['p_value']:.3g}")

# -- file round-trips --------------------------------------------------------

with tempfile.TemporaryDirectory(prefix="adsoup_rt_") as rt:
    rt = Path(rt)
    m.write_jsonl(ads, rt / "ads.jsonl")
    back, rejected = m.ingest(rt / "ads.jsonl")
    assert len(back) == len(ads) and not rejected
    assert back[0].to_dict() == ads[0].to_dict()

    registry.save_csv(rt / "registry.csv")
    registry2 = m.Registry.load_csv(rt / "registry.csv")
    assert registry2.rows() == registry.rows()

    split.save(rt / "split.json")
    split2 = m.SplitAssignment.load(rt / "split.json")
    assert split2.to_dict() == split.to_dict()

    vocab.save(rt / "vocab.txt")
    assert len(m.Vocabulary.load(rt / "vocab.txt")) == len(vocab)

    greedy.save(rt / "greedy")
    greedy2 = m.Checkpoint.load(rt / "greedy")
    assert greedy2.to_vector() == greedy.to_vector()
    assert greedy2.schema() == greedy.schema()
    assert greedy2.tensor("proj_b") == greedy.tensor("proj_b")

    # A stance checkpoint carries the encoder tensors, so it loads as one.
    enc2 = m.Encoder.load(rt / "greedy", rt / "vocab.txt")
    close(sum(x * x for x in enc2.encode(ads[0].body)), 1.0, 1e-9)
ok("round-trips", "jsonl, registry csv, split json, vocab, checkpoints")

# -- staged pipeline ---------------------------------------------------------

with tempfile.TemporaryDirectory(prefix="adsoup_pipe_") as tmp:
    tmp = Path(tmp)
    m.write_jsonl(ads, tmp / "ads.jsonl")
    registry.save_csv(tmp / "registry.csv")
    (tmp / "annotations.csv").write_text(
        "ad_id,theme_id\n" + "".join(f"{k},{v}\n" for k, v in annotations.items())
    )
    config = {
        "paths": {
            "corpus": str(tmp / "ads.jsonl"),
            "registry": str(tmp / "registry.csv"),
            "annotations": str(tmp / "annotations.csv"),
            "workdir": str(tmp / "work"),
        },
        "embedder": {"dim": 16, "epochs": 2, "batch_size": 16, "vocab_size": 2048},
        "sweep": {
            "epochs": 2,
            "batch_size": 16,
            "grid": [
                {"learning_rate": 1e-4, "weight_decay": 0.01},
                {"learning_rate": 3e-5, "weight_decay": 0.001},
                {"learning_rate": 1e-5, "weight_decay": 0.01},
            ],
        },
    }
    (tmp / "config.json").write_text(json.dumps(config))

    manifests = m.run_pipeline(tmp / "config.json")
    assert [man["stage"] for man in manifests] == list(m.STAGES)
    assert len({man["config_hash"] for man in manifests}) == 1
    eval_report = json.loads((tmp / "work" / "reports" / "eval_report.json").read_text())
    rows = {row["model"]: row for row in eval_report["payload"]}
    assert {"uniform_soup", "greedy_soup", "tfidf_lr"} <= set(rows)

    one = m.run_stage(tmp / "config.json", "eval")
    assert one["stage"] == "eval" and one["config_hash"] == manifests[0]["config_hash"]
ok("pipeline", f"8 stages, eval rows {sorted(rows)}")

print("smoke test passed")

import json
import math

import numpy as np
import pytest

from m2d2.errors import FormatError
from m2d2.evalmetrics import PredictionSet
from m2d2.report import (
    COLUMN_TITLES,
    build_report,
    comparison_text,
    comparison_tsv,
    dumps_report,
    load_report,
    per_label_text,
    per_label_tsv,
    render,
)
from m2d2.trainer import hypervolume


def make_report(name, seed=0, q=3, n=60, strength=1.0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, (n, q)).astype(float)
    logits = strength * (2 * y - 1) + rng.normal(size=(n, q))
    probs = 1.0 / (1.0 + np.exp(-logits))
    return build_report(PredictionSet(probs, y), name=name, mode="deterministic", seed=seed,
                        config_hash="abc", split="test", resamples=100)


def test_report_fields_and_consistency():
    rep = make_report("a")
    for key in ("schema_version", "name", "mode", "seed", "config_hash", "split", "n", "mean_entropy",
                "hypervolume", "per_label", "aggregate", "skipped_labels"):
        assert key in rep
    agg = [rep["aggregate"][k]["point"] for k in ("auroc", "auprc", "sel_auroc", "sel_auprc")]
    assert rep["hypervolume"] == pytest.approx(hypervolume(agg), rel=1e-15)
    for k in ("auroc", "auprc", "sel_auroc", "sel_auprc"):
        assert rep["aggregate"][k]["point"] == pytest.approx(np.mean([r[k]["point"] for r in rep["per_label"]]))
        assert rep["aggregate"][k]["lo"] <= rep["aggregate"][k]["point"] <= rep["aggregate"][k]["hi"]


def test_report_file_round_trip(tmp_path):
    rep = make_report("a")
    path = tmp_path / "m.json"
    path.write_text(dumps_report(rep))
    assert load_report(path) == rep


def test_schema_mismatch_and_missing_keys(tmp_path):
    rep = make_report("a")
    bad = dict(rep, schema_version=2)
    (tmp_path / "v.json").write_text(json.dumps(bad))
    with pytest.raises(FormatError) as info:
        load_report(tmp_path / "v.json")
    assert info.value.field == "schema_version"
    partial = {k: v for k, v in rep.items() if k != "aggregate"}
    (tmp_path / "p.json").write_text(json.dumps(partial))
    with pytest.raises(FormatError, match="aggregate"):
        load_report(tmp_path / "p.json")
    (tmp_path / "j.json").write_text("{not json")
    with pytest.raises(FormatError):
        load_report(tmp_path / "j.json")


def _data_rows(text):
    return [ln for ln in text.splitlines()[2:] if ln.strip()]


def test_single_input_gives_single_row():
    text = comparison_text([make_report("only")])
    header = text.splitlines()[0]
    assert header.split("  ")[0] == "Model"
    assert len(_data_rows(text)) == 1


def test_column_order_is_fixed():
    header = comparison_text([make_report("a")]).splitlines()[0]
    positions = [header.index(t) for t in ("AUROC", "AUPRC", "Selective AUROC", "Selective AUPRC")]
    assert positions == sorted(positions)
    assert COLUMN_TITLES == ("AUROC", "AUPRC", "Selective AUROC", "Selective AUPRC")
    tsv_head = comparison_tsv([make_report("a")]).splitlines()[0].split("\t")
    assert tsv_head[1::3] == ["auroc", "auprc", "sel_auroc", "sel_auprc"]


def test_three_inputs_mark_max_per_column():
    reps = [make_report("weak", 1, strength=0.2), make_report("mid", 2, strength=1.0),
            make_report("strong", 3, strength=3.0)]
    text = comparison_text(reps)
    rows = _data_rows(text)
    assert [r.split()[0] for r in rows] == ["weak", "mid", "strong"]
    for j, key in enumerate(("auroc", "auprc", "sel_auroc", "sel_auprc")):
        best = max(range(3), key=lambda i: reps[i]["aggregate"][key]["point"])
        marked = f"**{reps[best]['aggregate'][key]['point']:.3f}"
        assert marked in rows[best]
    assert sum(r.count("**") for r in rows) == 2 * 4
    assert "**" not in rows[0]


def test_tsv_has_full_precision_values():
    reps = [make_report("a"), make_report("b", 5)]
    lines = comparison_tsv(reps).splitlines()
    assert len(lines) == 3
    vals = lines[1].split("\t")
    assert vals[0] == "a" and float(vals[1]) == reps[0]["aggregate"]["auroc"]["point"]


def test_per_label_tables():
    rep = make_report("a", q=4)
    text = per_label_text(rep)
    assert text.splitlines()[0].split()[:2] == ["Label", "Prevalence"]
    assert len(_data_rows(text)) == 4
    lines = per_label_tsv(rep).splitlines()
    assert len(lines) == 5
    assert float(lines[1].split("\t")[1]) == rep["per_label"][0]["prevalence"]


def test_undefined_cells_render_as_na():
    rep = make_report("a")
    rep["aggregate"]["auprc"] = {"point": None, "lo": None, "hi": None}
    rep["per_label"][0]["auroc"] = {"point": None, "lo": None, "hi": None}
    assert "n/a" in comparison_text([rep])
    assert "n/a" in per_label_text(rep)
    assert comparison_tsv([rep]).splitlines()[1].split("\t")[4:7] == ["", "", ""]


def test_render_contains_every_run():
    reps = [make_report("det"), make_report("bayes", 1)]
    text = render(reps)
    assert text.count("Per-label results") == 2
    assert "det" in text and "bayes" in text


def test_mean_entropy_matches_predictions():
    rng = np.random.default_rng(0)
    probs = rng.uniform(0.05, 0.95, (30, 2))
    preds = PredictionSet(probs, rng.integers(0, 2, (30, 2)))
    rep = build_report(preds, name="x", mode="bayes_m2d2", seed=1, config_hash="h", split="shifted", resamples=100)
    ref = np.mean(-probs * np.log(probs) - (1 - probs) * np.log(1 - probs))
    assert rep["mean_entropy"] == pytest.approx(ref, rel=1e-12)
    assert rep["split"] == "shifted" and rep["n"] == 30 and not math.isnan(rep["hypervolume"])

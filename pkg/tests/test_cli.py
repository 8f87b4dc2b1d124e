import csv
import json

import numpy as np
import pytest

from bingpp import bing, cli, evaluation, raster


@pytest.fixture(scope="module")
def workspace(tmp_path_factory, synth_model):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--out", str(root / "data"), "--count", "3", "--seed", "40"]) == 0
    bing.save_model(synth_model, root / "model.json")
    return root


def run(*argv):
    return cli.main([str(a) for a in argv])


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_synth_writes_scenes(workspace):
    data = workspace / "data"
    assert sorted(p.name for p in data.glob("*.ppm")) == ["synth_40.ppm", "synth_41.ppm", "synth_42.ppm"]
    gts = evaluation.parse_gt_jsonl((data / "gt.jsonl").read_text().splitlines())
    img, ref = evaluation.synth_scene(41, 3 + 41 % 4)
    assert np.array_equal(raster.read_image(data / "synth_41.ppm"), img)
    assert [g for g in gts if g.image_id == "synth_41"] == ref


def test_propose_format_and_limit(workspace, tmp_path):
    out = tmp_path / "p.csv"
    assert run("propose", "--model", workspace / "model.json", "--input", workspace / "data" / "synth_40.ppm",
               "--max-proposals", 5, "--out", out) == 0
    r = rows(out)
    assert r[0] == ["image_id", "x1", "y1", "x2", "y2", "score"]
    assert 1 <= len(r) - 1 <= 5
    assert {row[0] for row in r[1:]} == {"synth_40"}
    for row in r[1:]:
        assert all(len(v.split(".")[1]) == 2 for v in row[1:5]) and len(row[5].split(".")[1]) == 6
    scores = [float(row[5]) for row in r[1:]]
    assert scores == sorted(scores, reverse=True)


def test_propose_directory_deterministic_across_threads(workspace, tmp_path):
    outs = []
    for i, threads in enumerate((1, 1, 4)):
        out = tmp_path / f"p{i}.csv"
        assert run("propose", "--model", workspace / "model.json", "--input", workspace / "data",
                   "--threads", threads, "--out", out) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1] == outs[2]
    ids = [row[0] for row in rows(tmp_path / "p0.csv")[1:]]
    assert sorted(set(ids)) == ["synth_40", "synth_41", "synth_42"]
    assert ids == sorted(ids)


def test_config_file_with_flag_override(workspace, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": str(workspace / "model.json"), "max_proposals": 3, "enable_seg": False}))
    out = tmp_path / "p.csv"
    assert run("propose", "--config", cfg, "--input", workspace / "data" / "synth_41.ppm",
               "--max-proposals", 2, "--out", out) == 0
    # two scan boxes at most; refinement may let the final NMS merge them
    assert 2 <= len(rows(out)) <= 3


def _gt_csv(path, gts):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cli.PROPOSAL_HEADER)
        for g in gts:
            w.writerow([g.image_id, *g.box.as_tuple(), 1.0])


def test_eval_perfect_and_empty(workspace, tmp_path, capsys):
    gt = workspace / "data" / "gt.jsonl"
    gts = evaluation.parse_gt_jsonl(gt.read_text().splitlines())
    _gt_csv(tmp_path / "perfect.csv", gts)
    assert run("eval", "--proposals", tmp_path / "perfect.csv", "--gt", gt, "--out", tmp_path / "m.json") == 0
    m = json.loads((tmp_path / "m.json").read_text())
    assert m["mabo"] == 1.0
    for row in m["dr"].values():
        assert row["10"] == row["100"] == row["1000"] == 1.0
        # one proposal per image can match only one of its objects
        assert row["1"] == pytest.approx(3 / len(gts))
    assert set(m["dr"]) == {"0.5", "0.7"} and set(m["dr"]["0.5"]) == {"1", "10", "100", "1000"}
    curve = rows(tmp_path / "m_curve.csv")
    assert curve[0] == ["eta", "recall"] and len(curve) == 12

    (tmp_path / "empty.csv").write_text(",".join(cli.PROPOSAL_HEADER) + "\n")
    assert run("eval", "--proposals", tmp_path / "empty.csv", "--gt", gt, "--out", tmp_path / "e.json") == 0
    e = json.loads((tmp_path / "e.json").read_text())
    assert e["mabo"] == 0.0 and all(v == 0.0 for row in e["dr"].values() for v in row.values())
    assert "MABO 0.0000" in capsys.readouterr().out


def test_eval_toy_fixture(tmp_path):
    (tmp_path / "gt.jsonl").write_text(
        '{"image":"a","class":"cat","box":[0,0,10,10]}\n{"image":"a","class":"dog","box":[20,0,30,10]}\n'
    )
    (tmp_path / "p.csv").write_text(
        "image_id,x1,y1,x2,y2,score\na,0,0,10,10,0.9\na,20,0,26,10,0.8\nb,0,0,1,1,0.5\n"
    )
    assert run("eval", "--proposals", tmp_path / "p.csv", "--gt", tmp_path / "gt.jsonl", "--out",
               tmp_path / "m.json", "--budgets", "1,2") == 0
    m = json.loads((tmp_path / "m.json").read_text())
    assert m["dr"]["0.5"] == {"1": 0.5, "2": 1.0}
    assert m["dr"]["0.7"] == {"1": 0.5, "2": 0.5}
    assert m["abo"] == {"cat": 1.0, "dog": pytest.approx(0.6)}
    assert m["mabo"] == pytest.approx(0.8)


def test_eval_voc_directory(tmp_path):
    ann = tmp_path / "Annotations"
    ann.mkdir()
    (ann / "000001.xml").write_text(
        "<annotation><filename>000001.jpg</filename><object><name>dog</name>"
        "<bndbox><xmin>48</xmin><ymin>240</ymin><xmax>195</xmax><ymax>371</ymax></bndbox></object></annotation>"
    )
    (tmp_path / "p.csv").write_text("image_id,x1,y1,x2,y2,score\n000001,48,240,196,372,1\n")
    assert run("eval", "--proposals", tmp_path / "p.csv", "--gt", ann, "--out", tmp_path / "m.json") == 0
    assert json.loads((tmp_path / "m.json").read_text())["mabo"] == 1.0


def test_learn_outputs(workspace, tmp_path):
    args = ["learn", "--model", workspace / "model.json", "--input", workspace / "data",
            "--gt", workspace / "data" / "gt.jsonl", "--max-proposals", 200]
    assert run(*args, "--out", tmp_path / "a.json") == 0
    assert run(*args, "--out", tmp_path / "b.json") == 0
    learned = json.loads((tmp_path / "a.json").read_text())
    assert len(learned["gamma"]) == 3 and all(0 <= g <= 1 for g in learned["gamma"])
    assert learned["delta"] and all(0 < d < 1 for d in learned["delta"])
    table = rows(tmp_path / "a_delta_table.csv")
    assert table[0] == ["subset_bitmask", "deltas", "loss", "dr_at_eta", "mabo"]
    assert len(table) == 512
    trace = rows(tmp_path / "a_gamma_trace.csv")
    assert len(trace) == 1 + 3 * 101
    for suffix in (".json", "_delta_table.csv", "_gamma_trace.csv"):
        a = (tmp_path / f"a{suffix}").read_bytes()
        assert a == (tmp_path / f"b{suffix}").read_bytes()
    best = min(int(r[2]) for r in table[1:])
    chosen = next(r for r in table[1:] if [float(v) for v in r[1].split()] == learned["delta"])
    assert int(chosen[2]) == best


def test_learn_without_matching_images(workspace, tmp_path):
    (tmp_path / "gt.jsonl").write_text('{"image":"other","class":"c","box":[0,0,5,5]}\n')
    assert run("learn", "--model", workspace / "model.json", "--input", workspace / "data",
               "--gt", tmp_path / "gt.jsonl", "--out", tmp_path / "l.json") == 2


def test_bench_rows_and_shares(workspace, tmp_path, capsys):
    out = tmp_path / "bench.csv"
    assert run("bench", "--model", workspace / "model.json", "--synth", 3, "--out", out) == 0
    r = rows(out)
    assert r[0][:6] == ["image_id", "bing_ms", "edge_ms", "seg_ms", "nms_ms", "total_ms"]
    assert len(r) == 4
    for row in r[1:]:
        v = [float(x) for x in row[1:6]]
        assert sum(v[:4]) <= v[4] * 1.05
    text = capsys.readouterr().out
    lines = {ln.split()[0]: ln for ln in text.splitlines() if ln.strip()}
    for stage in ("bing", "edge", "seg", "nms"):
        assert "share" in lines[stage]


def test_bench_seg_adds_time(workspace, tmp_path):
    totals = {}
    for name, extra in (("both", []), ("edge", ["--no-seg"])):
        out = tmp_path / f"{name}.csv"
        assert run("bench", "--model", workspace / "model.json", "--input", workspace / "data", "--out", out,
                   *extra) == 0
        totals[name] = sum(float(row[5]) for row in rows(out)[1:])
    assert totals["both"] > totals["edge"]


def test_train_command(workspace, tmp_path, capsys):
    out = tmp_path / "m.json"
    assert run("train", "--input", workspace / "data", "--gt", workspace / "data" / "gt.jsonl", "--out", out) == 0
    model = bing.load_model(out)
    assert len(model.sizes) == 36 and model.n_g == bing.DEFAULT_NG
    assert "training accuracy" in capsys.readouterr().out


def test_exit_codes(workspace, tmp_path, capsys):
    assert run("propose", "--input", workspace / "data") == 1  # no model
    assert run("propose", "--model", workspace / "model.json", "--input", tmp_path / "missing.ppm") in (1, 2)
    assert run("propose", "--bogus") == 1
    assert run("propose", "--model", tmp_path / "nope.json", "--input", workspace / "data") == 2
    bad = tmp_path / "bad.ppm"
    bad.write_bytes(b"P6\n4 4\n255\n")
    assert run("propose", "--model", workspace / "model.json", "--input", bad) == 2
    (tmp_path / "p.csv").write_text("wrong,header\n")
    assert run("eval", "--proposals", tmp_path / "p.csv", "--gt", workspace / "data" / "gt.jsonl",
               "--out", tmp_path / "m.json") == 1
    empty_gt = tmp_path / "e.jsonl"
    empty_gt.write_text("")
    (tmp_path / "q.csv").write_text(",".join(cli.PROPOSAL_HEADER) + "\n")
    assert run("eval", "--proposals", tmp_path / "q.csv", "--gt", empty_gt, "--out", tmp_path / "m.json") == 2
    capsys.readouterr()

import csv
import json
import random

import pytest

from conftest import make_traj, random_corpus
from trajoverlap.cli import main
from trajoverlap.core import LocationVocabulary
from trajoverlap.ingest import DatasetSplit, write_split
from trajoverlap.manifest import read_manifest


def vocab(n):
    return LocationVocabulary.from_entries([(40.0 + 0.01 * i, -74.0, f"v{i}") for i in range(n)])


def write_toy(d):
    """Two train and two test trajectories with hand-computed overlaps.

    test 2 = [1,2,3,4] repeats train 0:        JS 1, LCST 1, OFE 1
    test 3 = [5,6,7,6] against train 1 [5,6]:  JS 2/3, LCST 2/4, OFE 1/4
    """
    train = [make_traj(0, [1, 2, 3, 4], user="a"), make_traj(1, [5, 6], user="b")]
    test = [make_traj(2, [1, 2, 3, 4], user="a", t0=10_000), make_traj(3, [5, 6, 7, 6], user="b", t0=10_000)]
    write_split(DatasetSplit(train, [], test, vocab(10), {}), d)
    return d


def fractions(out):
    with open(out / "overlap_summary.json") as fh:
        return {m: s["fractions"] for m, s in json.load(fh).items()}


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def toy(tmp_path):
    return write_toy(tmp_path / "split")


class TestOverlapCommand:
    def test_toy_fractions(self, toy, tmp_path):
        assert run("overlap", "--split", toy, "--out", tmp_path / "ov") == 0
        f = fractions(tmp_path / "ov")
        assert f["js"] == {"0-20": 0, "20-40": 0, "40-60": 0, "60-80": 0.5, "80-100": 0.5}
        assert f["lcst"] == {"0-20": 0, "20-40": 0, "40-60": 0.5, "60-80": 0, "80-100": 0.5}
        assert f["ofe"] == {"0-20": 0, "20-40": 0.5, "40-60": 0, "60-80": 0, "80-100": 0.5}

    def test_metric_flag(self, toy, tmp_path):
        assert run("overlap", "--split", toy, "--metrics", "js,ofe", "--out", tmp_path / "ov") == 0
        assert sorted(p.name for p in (tmp_path / "ov").glob("*.csv")) == ["overlap_js.csv", "overlap_ofe.csv"]

    def test_threads_identical(self, tmp_path):
        train, test = random_corpus(random.Random(7), 120, 300, 12, 10)
        write_split(DatasetSplit(train, [], test, vocab(12), {}), tmp_path / "split")
        for threads in (1, 8):
            assert run("overlap", "--split", tmp_path / "split", "--threads", threads,
                       "--out", tmp_path / f"t{threads}") == 0
        for m in ("js", "lcst", "ofe"):
            a = (tmp_path / "t1" / f"overlap_{m}.csv").read_bytes()
            assert a == (tmp_path / "t8" / f"overlap_{m}.csv").read_bytes()
        assert read_manifest(tmp_path / "t1").digest == read_manifest(tmp_path / "t8").digest

    def test_no_prune_identical(self, toy, tmp_path):
        run("overlap", "--split", toy, "--out", tmp_path / "a")
        run("overlap", "--split", toy, "--no-prune", "--out", tmp_path / "b")
        assert (tmp_path / "a" / "overlap_lcst.csv").read_bytes() == (tmp_path / "b" / "overlap_lcst.csv").read_bytes()

    def test_cache(self, toy, tmp_path, monkeypatch):
        monkeypatch.setenv("TRAJOVERLAP_CACHE", str(tmp_path / "cache"))
        (tmp_path / "cache").mkdir()
        run("overlap", "--split", toy, "--out", tmp_path / "a")
        assert len(list((tmp_path / "cache").iterdir())) == 1
        run("overlap", "--split", toy, "--out", tmp_path / "b")
        assert (tmp_path / "a" / "overlap_js.csv").read_bytes() == (tmp_path / "b" / "overlap_js.csv").read_bytes()

    def test_errors(self, toy, tmp_path):
        assert run("overlap", "--split", tmp_path / "missing", "--out", tmp_path / "o") == 1
        assert run("overlap", "--split", toy, "--metrics", "dtw", "--out", tmp_path / "o") == 1
        (toy / "test.jsonl").write_text('{"user": "a"}\n')
        assert run("overlap", "--split", toy, "--out", tmp_path / "o") == 3


class TestEvalCommand:
    def test_mmc_toy(self, toy, tmp_path, capsys):
        """From 3 the only seen move is to 4 (hit); 7 was never left in train, so the
        popularity fallback ranks 1..6 by id and target 6 lands sixth (miss)."""
        assert run("overlap", "--split", toy, "--out", tmp_path / "ov") == 0
        assert run("mmc", "--split", toy, "--out", tmp_path / "mmc") == 0
        assert run("eval", "--split", toy, "--scores", tmp_path / "mmc" / "mmc_test.jsonl",
                   "--overlap", tmp_path / "ov", "--k", 5, "--out", tmp_path / "ev") == 0
        rep = json.loads((tmp_path / "ev" / "report_mmc_test.json").read_text())
        assert rep["overall"] == 0.5
        assert rep["per_bin"]["js"]["80-100"] == 1.0
        assert rep["per_bin"]["js"]["60-80"] == 0.0
        assert rep["per_bin"]["js"]["0-20"] is None
        rows = list(csv.reader((tmp_path / "ev" / "table.csv").open()))
        assert rows[0][:3] == ["model", "acc@5", "js_0-20"]
        assert rows[1][:3] == ["mmc_test", "0.500", ""]

    def test_k_monotone_and_stratify(self, toy, tmp_path):
        run("overlap", "--split", toy, "--out", tmp_path / "ov")
        run("mmc", "--split", toy, "--out", tmp_path / "mmc")
        acc = {}
        for k in (1, 5, 7):
            run("eval", "--split", toy, "--scores", tmp_path / "mmc" / "mmc_test.jsonl", "--overlap",
                tmp_path / "ov", "--stratify", "lcst", "--k", k, "--out", tmp_path / f"ev{k}")
            rep = json.loads((tmp_path / f"ev{k}" / "report_mmc_test.json").read_text())
            assert set(rep["per_bin"]) == {"lcst"}
            acc[k] = rep["overall"]
        assert acc[1] <= acc[5] <= acc[7] == 1.0

    def test_bad_score_file(self, toy, tmp_path):
        (tmp_path / "s.jsonl").write_text('{"traj": 2, "cand": [4, 1], "score": [0.1, 0.9]}\n')
        assert run("eval", "--split", toy, "--scores", tmp_path / "s.jsonl", "--out", tmp_path / "ev") == 3
        (tmp_path / "k.jsonl").write_text('{"traj": 2, "locations": [4, 1], "scores": [0.9, 0.1]}\n')
        assert run("eval", "--split", toy, "--scores", tmp_path / "k.jsonl", "--out", tmp_path / "ev2") == 3


class TestPipeline:
    @pytest.fixture
    def raw(self, tmp_path):
        from trajoverlap.synthetic import law_driven_records
        p = tmp_path / "raw.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["user", "timestamp", "lat", "lon", "venue"])
            w.writerows(law_driven_records(3, n_users=30, n_locations=400))
        return p

    def test_preprocess_counts_and_determinism(self, raw, tmp_path, capsys):
        assert run("preprocess", "--format", "generic-csv", "--input", raw, "--out", tmp_path / "a") == 0
        out = capsys.readouterr().out
        assert "Users" in out and "Locations" in out and "Trajectories" in out
        assert run("preprocess", "--format", "generic-csv", "--input", raw, "--out", tmp_path / "b") == 0
        assert read_manifest(tmp_path / "a").digest == read_manifest(tmp_path / "b").digest
        assert [p.name for p in (tmp_path / "a").glob("manifest*.json")] == ["manifest.json"]

    def test_empty_input(self, tmp_path):
        (tmp_path / "empty.csv").write_text("user,timestamp,lat,lon\n")
        assert run("preprocess", "--format", "generic-csv", "--input", tmp_path / "empty.csv",
                   "--out", tmp_path / "o") == 2

    def test_config_file_and_overrides(self, raw, tmp_path):
        (tmp_path / "cfg.json").write_text(json.dumps({"pipeline": {"min_trajectories": 50}}))
        assert run("preprocess", "--format", "generic-csv", "--input", raw, "--config", tmp_path / "cfg.json",
                   "--out", tmp_path / "a") == 2
        assert run("preprocess", "--format", "generic-csv", "--input", raw, "--config", tmp_path / "cfg.json",
                   "--min-trajectories", 5, "--out", tmp_path / "b") == 0
        (tmp_path / "bad.json").write_text(json.dumps({"colour": 1}))
        assert run("preprocess", "--format", "generic-csv", "--input", raw, "--config", tmp_path / "bad.json",
                   "--out", tmp_path / "c") == 1

    def test_usage_error_is_input_error(self):
        assert run("overlap") == 1
        assert run("frobnicate") == 1

    def test_one_manifest_per_directory(self, toy, tmp_path):
        assert run("overlap", "--split", toy, "--out", tmp_path / "d") == 0
        assert run("mmc", "--split", toy, "--out", tmp_path / "d") == 3

    def test_end_to_end(self, raw, tmp_path):
        s, o = tmp_path / "split", tmp_path
        assert run("preprocess", "--format", "generic-csv", "--input", raw, "--out", s) == 0
        assert run("overlap", "--split", s, "--out", o / "ov") == 0
        assert run("mmc", "--split", s, "--depth", 0, "--out", o / "mmc") == 0
        assert run("features", "--split", s, "--out", o / "feat") == 0
        assert run("eval", "--split", s, "--scores", o / "mmc" / "mmc_test.jsonl", "--overlap", o / "ov",
                   "--out", o / "ev") == 0
        # identity scorer: zero improvement everywhere
        assert run("rerank-train", "--split", s, "--identity", "--out", o / "id") == 0
        assert run("rerank-apply", "--split", s, "--scores", o / "mmc" / "mmc_test.jsonl", "--features", o / "feat",
                   "--model", o / "id" / "scorer.json", "--overlap", o / "ov", "--out", o / "ra_id") == 0
        rep = json.loads((o / "ra_id" / "improvement.json").read_text())
        assert rep["overall"]["relative"] in (0.0, None)
        for bins in rep["per_bin"].values():
            for cell in bins.values():
                assert cell["base"] == cell["reranked"]
        assert "undefined" in (o / "ra_id" / "improvement.csv").read_text()
        # learned scorer, twice: byte-identical outputs
        for tag in ("x", "y"):
            assert run("rerank-train", "--split", s, "--scores", o / "mmc" / "mmc_valid.jsonl",
                       "--features", o / "feat", "--out", o / f"rt{tag}") == 0
            assert run("rerank-apply", "--split", s, "--scores", o / "mmc" / "mmc_test.jsonl", "--features",
                       o / "feat", "--model", o / f"rt{tag}" / "scorer.json", "--overlap", o / "ov",
                       "--out", o / f"ra{tag}") == 0
        assert (o / "rtx" / "samples.jsonl").read_bytes() == (o / "rty" / "samples.jsonl").read_bytes()
        assert (o / "rax" / "reranked.jsonl").read_bytes() == (o / "ray" / "reranked.jsonl").read_bytes()
        assert read_manifest(o / "rtx").digest != read_manifest(o / "rax").digest
        assert run("report", "--overlap", f"syn={o / 'ov'}", "--eval", f"syn={o / 'ev'}", "--out", o / "rep") == 0
        names = sorted(p.name for p in (o / "rep").iterdir())
        assert names == ["figure1_data.csv", "figure2_data.csv", "manifest.json", "table_syn.csv"]
        fig1 = list(csv.DictReader((o / "rep" / "figure1_data.csv").open()))
        for m in ("js", "lcst", "ofe"):
            assert sum(float(r["fraction"]) for r in fig1 if r["metric"] == m) == pytest.approx(1.0, abs=1e-6)

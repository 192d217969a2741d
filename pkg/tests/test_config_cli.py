import csv
import json
import subprocess
import sys

import pytest

from splitfed.checkpoint import load_checkpoint
from splitfed.cli import main
from splitfed.config import KEYS, ExperimentConfig, load_config
from splitfed.data import synthesize_corpus
from splitfed.errors import ConfigError
from splitfed.metrics import METRIC_NAMES, aggregate_clients
from splitfed.model import ModelConfig, init_model
from splitfed.tokenizer import Vocab

SMALL = ["data.synth.n=100", "fed.clients=4", "vocab.size=200", "model.max_len=32",
         "pretrain.rounds=1", "pretrain.steps=2", "pretrain.batch=4", "pretrain.lr=1e-3",
         "fed.rounds=2", "fed.local_epochs=1", "fed.fraction=1.0", "finetune.lr=1e-3", "seed=3"]


def sets(*pairs):
    return [a for p in (*SMALL, *pairs) for a in ("--set", p)]


def ok(*argv):
    assert main([str(a) for a in argv]) == 0


class TestConfig:
    def test_defaults(self):
        cfg = ExperimentConfig()
        assert set(cfg) == set(KEYS)
        assert cfg["fed.clients"] == 10 and cfg["fed.ala"] is False and cfg["pretrain.steps"] is None

    def test_overrides_parse_types(self):
        cfg = load_config(None, ["fed.ala=on", "fed.fraction = 0.25", "pretrain.steps=7"])
        assert cfg["fed.ala"] is True and cfg["fed.fraction"] == 0.25 and cfg["pretrain.steps"] == 7

    def test_file_then_overrides(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("# comment\nfed.clients=3\n\nseed=9\n")
        cfg = load_config(p, ["seed=4"])
        assert cfg["fed.clients"] == 3 and cfg["seed"] == 4

    def test_unknown_key_names_line(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("seed=1\nfed.cleints=3\n")
        with pytest.raises(ConfigError, match=r"c\.txt:2.*fed\.cleints"):
            load_config(p)
        with pytest.raises(ConfigError):
            ExperimentConfig({"nope": 1})

    @pytest.mark.parametrize("line", ["seed=abc", "fed.ala=maybe", "no equals sign"])
    def test_bad_values(self, line):
        with pytest.raises(ConfigError):
            load_config(None, [line])

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.txt")

    def test_text_round_trip(self):
        cfg = load_config(None, ["fed.ala=on", "pretrain.steps=none", "data.alpha=0.3"])
        again = ExperimentConfig().updated(cfg.to_text().splitlines())
        assert again.as_dict() == cfg.as_dict()


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """partition -> pretrain -> finetune on a 100-record corpus."""
    root = tmp_path_factory.mktemp("cli")
    ok("partition", "--out", root / "shards", *sets())
    ok("pretrain", "--shards", root / "shards", "--out", root / "pre", *sets())
    ok("finetune", "--shards", root / "shards", "--checkpoint", root / "pre/checkpoint.fswt",
       "--vocab", root / "pre/vocab.txt", "--out", root / "ft", *sets())
    return root


def read_shard_rows(d):
    rows = []
    for f in sorted(d.glob("client_*.csv")):
        with open(f, newline="") as fh:
            rows.extend(tuple(r) for r in list(csv.reader(fh))[1:])
    return rows


class TestPartition:
    def test_files_and_index(self, run):
        files = sorted(p.name for p in (run / "shards").glob("client_*.csv"))
        assert files == [f"client_{i:03d}.csv" for i in range(4)]
        index = json.loads((run / "shards/index.json").read_text())
        assert index["scenario"] == "iid" and len(index["clients"]) == 4
        sizes = [sum(c["counts"].values()) for c in index["clients"]]
        assert sizes == [25] * 4
        for f in files:
            assert len(list(csv.reader(open(run / "shards" / f)))) == 26  # header + 25 rows

    def test_every_record_once(self, run):
        rows = read_shard_rows(run / "shards")
        corpus = synthesize_corpus(100, 0.98, 3)
        assert sorted((u, l) for u, l, _ in rows) == sorted((r.url, str(r.label)) for r in corpus)

    def test_byte_identical_rerun(self, run, tmp_path):
        ok("partition", "--out", tmp_path, *sets())
        for f in (run / "shards").iterdir():
            if f.name != "timing.json":
                assert (tmp_path / f.name).read_bytes() == f.read_bytes(), f.name
        assert (tmp_path / "timing.json").exists()

    def test_noniid3_histograms_share_one_draw(self, tmp_path):
        ok("partition", "--out", tmp_path,
           *sets("data.synth.n=2000", "data.scenario=noniid3", "data.alpha=0.7"))
        index = json.loads((tmp_path / "index.json").read_text())
        props = index["dirichlet_proportions"]
        assert len(props) == 2 and all(abs(sum(row) - 1) < 1e-9 for row in props)
        for split in ("train", "test"):
            for c in (0, 1):
                counts = [e["label_histogram"][split][c] for e in index["clients"]]
                n = sum(counts)
                # largest-remainder rounding, plus at most one record moved to fill an empty shard
                assert all(abs(x - p * n) < 2 for x, p in zip(counts, props[c]))

    def test_config_written(self, run):
        text = (run / "shards/config.txt").read_text()
        assert "fed.clients=4\n" in text and "fed.ala=off\n" in text


class TestTraining:
    def test_pretrain_outputs(self, run):
        manifest = json.loads((run / "pre/manifest.json").read_text())
        assert manifest["command"] == "pretrain"
        assert "checkpoint.fswt" in manifest["outputs"] and manifest["vocab_sha256"]
        lines = (run / "pre/pretrain_log.jsonl").read_text().splitlines()
        assert len(lines) == 4 and all(json.loads(x)["steps"] == 2 for x in lines)

    def test_zero_pretrain_rounds_is_init(self, run, tmp_path):
        ok("pretrain", "--shards", run / "shards", "--vocab", run / "pre/vocab.txt", "--out", tmp_path,
           *sets("pretrain.rounds=0"))
        vocab = Vocab.load(run / "pre/vocab.txt")
        mcfg = ModelConfig.preset("tiny", vocab_size=len(vocab), max_len=32, seed=3)
        init = {n: w for part in init_model(mcfg) for n, w in part.state().items()}
        got = load_checkpoint(tmp_path / "checkpoint.fswt")
        assert list(got) == list(init)
        assert all(got[n].tobytes() == init[n].tobytes() for n in init)

    def test_finetune_rounds_log(self, run):
        recs = [json.loads(x) for x in (run / "ft/rounds.jsonl").read_text().splitlines()]
        assert [(r["round"], r["client_id"]) for r in recs] == [(t, c) for t in range(2) for c in range(4)]
        assert all(0 <= r["acc"] <= 1 for r in recs)

    def test_finetune_is_deterministic(self, run, tmp_path):
        ok("finetune", "--shards", run / "shards", "--checkpoint", run / "pre/checkpoint.fswt",
           "--vocab", run / "pre/vocab.txt", "--out", tmp_path, *sets())
        for name in ("rounds.jsonl", "checkpoint.fswt", "manifest.json"):
            assert (tmp_path / name).read_bytes() == (run / "ft" / name).read_bytes()

    def test_ala_switch(self, run, tmp_path):
        ok("finetune", "--shards", run / "shards", "--checkpoint", run / "pre/checkpoint.fswt",
           "--vocab", run / "pre/vocab.txt", "--out", tmp_path, *sets("fed.ala=on", "fed.ala.cap=3"))
        assert json.loads((tmp_path / "manifest.json").read_text())["config"]["fed.ala"] is True
        assert (tmp_path / "checkpoint.fswt").read_bytes() != (run / "ft/checkpoint.fswt").read_bytes()

    def test_freeze_all_encoder(self, run, tmp_path):
        ok("finetune", "--shards", run / "shards", "--checkpoint", run / "pre/checkpoint.fswt",
           "--vocab", run / "pre/vocab.txt", "--out", tmp_path, *sets("freeze.layers=all-encoder"))
        before = load_checkpoint(run / "pre/checkpoint.fswt")
        after = load_checkpoint(tmp_path / "checkpoint.fswt")
        enc = [n for n in before if n.startswith("server.layer")]
        assert enc and all(after[n].tobytes() == before[n].tobytes() for n in enc)
        assert after["head.w"].tobytes() != before["head.w"].tobytes()

    def test_socket_transport_matches_inproc(self, run, tmp_path):
        ok("pretrain", "--shards", run / "shards", "--vocab", run / "pre/vocab.txt",
           "--out", tmp_path / "pre", *sets("transport=socket"))
        assert ((tmp_path / "pre/checkpoint.fswt").read_bytes()
                == (run / "pre/checkpoint.fswt").read_bytes())
        ok("finetune", "--shards", run / "shards", "--checkpoint", run / "pre/checkpoint.fswt",
           "--vocab", run / "pre/vocab.txt", "--out", tmp_path / "ft", *sets("transport=socket"))
        for name in ("rounds.jsonl", "checkpoint.fswt"):
            assert (tmp_path / "ft" / name).read_bytes() == (run / "ft" / name).read_bytes()

    def test_evaluate(self, run, tmp_path):
        ok("evaluate", "--shards", run / "shards", "--checkpoint", run / "ft/checkpoint.fswt",
           "--vocab", run / "pre/vocab.txt", "--out", tmp_path / "eval.jsonl", *sets())
        lines = (tmp_path / "eval.jsonl").read_text().splitlines()
        assert [json.loads(x)["client_id"] for x in lines] == [0, 1, 2, 3]


@pytest.mark.slow
def test_pretrain_loss_falls_between_rounds(tmp_path):
    """Defaults otherwise: 5000 URLs, tiny preset, lr 5e-5, batch 64."""
    for seed in range(3):
        argv = [a for p in ("fed.clients=4", "pretrain.rounds=2", f"seed={seed}") for a in ("--set", p)]
        ok("partition", "--out", tmp_path / f"s{seed}", *argv)
        ok("pretrain", "--shards", tmp_path / f"s{seed}", "--out", tmp_path / f"p{seed}", *argv)
        recs = [json.loads(x) for x in (tmp_path / f"p{seed}/pretrain_log.jsonl").read_text().splitlines()]
        means = [sum(r["mlm_loss"] for r in recs if r["round"] == t) / 4 for t in (0, 1)]
        assert means[1] < means[0], (seed, means)


class TestReport:
    def test_single_run_summary_is_last_round_aggregate(self, run, tmp_path):
        ok("report", run / "ft", "--labels", "only", "--out", tmp_path)
        recs = [json.loads(x) for x in (run / "ft/rounds.jsonl").read_text().splitlines()]
        last = aggregate_clients([r for r in recs if r["round"] == 1])
        summary = list(csv.reader(open(tmp_path / "summary.csv")))
        assert summary == [["run-label", *METRIC_NAMES], ["only", *(f"{last[k]:.4f}" for k in METRIC_NAMES)]]

    def test_sampling_ratio_series(self, run, tmp_path):
        dirs = []
        for frac in ("0.2", "0.5", "0.7"):
            d = tmp_path / f"frac{frac}"
            ok("finetune", "--shards", run / "shards", "--checkpoint", run / "pre/checkpoint.fswt",
               "--vocab", run / "pre/vocab.txt", "--out", d, *sets(f"fed.fraction={frac}"))
            dirs.append(d)
        ok("report", *dirs, "--labels", "f0.2,f0.5,f0.7", "--out", tmp_path / "r")
        rows = list(csv.reader(open(tmp_path / "r/accuracy_vs_round.csv")))[1:]
        assert sorted({r[1] for r in rows}) == ["f0.2", "f0.5", "f0.7"]
        assert len(rows) == 6
        # 1, 2 and 3 of 4 clients sampled per round give three distinct models
        assert len({(d / "checkpoint.fswt").read_bytes() for d in dirs}) == 3

    def test_outputs_and_determinism(self, run, tmp_path):
        ok("report", run / "ft", run / "ft", "--labels", "a,b", "--out", tmp_path / "r1")
        ok("report", run / "ft", run / "ft", "--labels", "a,b", "--out", tmp_path / "r2")
        for name in ("accuracy_vs_round.csv", "summary.csv"):
            assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()
        rows = list(csv.reader(open(tmp_path / "r1/accuracy_vs_round.csv")))
        assert rows[0] == ["round", "run-label", "acc", "tpr", "fpr", "f1", "auc"]
        assert [(r[0], r[1]) for r in rows[1:]] == [("0", "a"), ("1", "a"), ("0", "b"), ("1", "b")]
        summary = list(csv.reader(open(tmp_path / "r1/summary.csv")))
        assert [r[0] for r in summary[1:]] == ["a", "b"] and summary[1][1:] == summary[2][1:]

    def test_round_mean_matches_log(self, run, tmp_path):
        ok("report", run / "ft", "--out", tmp_path)
        recs = [json.loads(x) for x in (run / "ft/rounds.jsonl").read_text().splitlines()]
        rows = list(csv.reader(open(tmp_path / "accuracy_vs_round.csv")))[1:]
        for t, row in enumerate(rows):
            accs = [r["acc"] for r in recs if r["round"] == t]
            assert float(row[2]) == pytest.approx(sum(accs) / len(accs), abs=1e-12)


class TestExitCodes:
    def test_vocab_hash_mismatch(self, run, tmp_path, capsys):
        other = tmp_path / "other_vocab.txt"
        text = (run / "pre/vocab.txt").read_text().splitlines()
        text[-2], text[-1] = text[-1], text[-2]
        other.write_text("\n".join(text) + "\n")
        code = main(["finetune", "--shards", str(run / "shards"), "--checkpoint",
                     str(run / "pre/checkpoint.fswt"), "--vocab", str(other), "--out",
                     str(tmp_path / "ft"), *sets()])
        assert code == 2
        assert "vocabulary hash" in capsys.readouterr().err

    def test_missing_shards(self, tmp_path):
        assert main(["pretrain", "--shards", str(tmp_path / "none"), "--out", str(tmp_path / "o"),
                     *sets()]) == 2

    def test_missing_checkpoint(self, run, tmp_path):
        assert main(["finetune", "--shards", str(run / "shards"), "--checkpoint",
                     str(tmp_path / "x.fswt"), "--vocab", str(run / "pre/vocab.txt"), "--out",
                     str(tmp_path / "o"), *sets()]) == 2

    def test_incomplete_run_dir(self, run, tmp_path):
        (tmp_path / "half").mkdir()
        (tmp_path / "half/rounds.jsonl").write_text((run / "ft/rounds.jsonl").read_text())
        assert main(["report", str(tmp_path / "half"), "--out", str(tmp_path / "r")]) == 3

    def test_unknown_config_key(self, tmp_path):
        assert main(["partition", "--out", str(tmp_path), "--set", "fed.clientz=3"]) == 2


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "splitfed", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("partition", "build-vocab", "pretrain", "finetune", "evaluate", "report"):
        assert cmd in out.stdout

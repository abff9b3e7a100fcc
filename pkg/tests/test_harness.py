import itertools
import json
from dataclasses import replace

import numpy as np
import pytest

from smilegeo.agents import AgentId, SimWorld, corpus_from_gazetteer
from smilegeo.discussion import DiscussionConfig
from smilegeo.errors import IngestError, ValidationError
from smilegeo.geo import box_distance_km
from smilegeo.harness import (RunReport, build_roster, evaluate, ingest, load_config, solo_accuracies, split,
                              synth_world, without_timing, write_config, write_dataset)
from smilegeo.harness.cli import main
from smilegeo.harness.config import RunConfig
from smilegeo.harness.evaluate import nearest_rank_median
from smilegeo.learn import SelectionModel, save_checkpoint


@pytest.fixture(scope="module")
def small_world():
    return synth_world(8, 4, 60, seed=7)


def sim_roster(world, **overrides):
    sw = SimWorld(world.gazetteer, world.th, corpus_from_gazetteer(world.gazetteer), 0.15)
    spec = [dict(e, **overrides) for e in world.roster_spec()]
    return build_roster(spec, sw)


# ingest

def test_ingest_empty_file(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text("")
    assert ingest(p) == []


def test_ingest_round_trip_preserves_order(tmp_path):
    world = synth_world(4, 2, 500, seed=1)
    p = tmp_path / "d.jsonl"
    write_dataset(p, world.dataset)
    back = ingest(p, world.gazetteer)
    assert len(back) == 500 and back == world.dataset


def test_ingest_duplicate_id_named(tmp_path, small_world):
    p = tmp_path / "d.jsonl"
    write_dataset(p, [small_world.dataset[0], small_world.dataset[1], small_world.dataset[0]])
    with pytest.raises(IngestError, match="s00000") as info:
        ingest(p)
    assert info.value.line == 3


@pytest.mark.parametrize("line", [
    "{not json",
    '{"id": "a"}',
    '{"id": "a", "image_seed": 1, "truth_text": "x", "truth_box": [1, 2, 3], "region_key": "r"}',
    '{"id": "a", "image_seed": -1, "truth_text": "x", "truth_box": [1, 2, 3, 4], "region_key": "r"}',
    '{"id": "a", "image_seed": 1, "truth_text": "x", "truth_box": [5, 2, 3, 4], "region_key": "r"}',
    "[1, 2]",
])
def test_ingest_malformed_line_reports_line(tmp_path, small_world, line):
    p = tmp_path / "d.jsonl"
    write_dataset(p, small_world.dataset[:2])
    with open(p, "a") as fh:
        fh.write(line + "\n")
    with pytest.raises(IngestError, match="line 3"):
        ingest(p)


def test_ingest_rejects_ungeocodable_truth(tmp_path, small_world):
    p = tmp_path / "d.jsonl"
    write_dataset(p, [replace(small_world.dataset[0], truth_text="Atlantis")])
    with pytest.raises(IngestError, match="geocodable"):
        ingest(p, small_world.gazetteer)


# synth

def test_synth_is_byte_identical(tmp_path):
    a = synth_world(8, 4, 100, seed=7).save(tmp_path / "a")
    b = synth_world(8, 4, 100, seed=7).save(tmp_path / "b")
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]
    c = synth_world(8, 4, 100, seed=8).save(tmp_path / "c")
    assert a[1].read_bytes() != c[1].read_bytes()


@pytest.mark.parametrize("seed", range(5))
def test_synth_regions_are_separated(seed):
    w = synth_world(8, 4, 10, seed=seed, th=50)
    dists = [box_distance_km(a, b) for (_, a), (_, b) in itertools.combinations(w.regions, 2)]
    assert min(dists) > 250


def test_synth_round_robin_specialists():
    w = synth_world(8, 4, 10, seed=0)
    counts = {key: sum(key in p.home_regions for p in w.profiles) for key, _ in w.regions}
    assert set(counts.values()) == {2}


def test_synth_records_are_consistent(small_world):
    w = small_world
    assert len({r.id for r in w.dataset}) == len(w.dataset)
    region_box = dict(w.regions)
    scene = {}
    for rec in w.dataset:
        assert w.gazetteer.geocode(rec.truth_text) == rec.truth_box
        assert w.gazetteer.lookup(rec.caption).canonical_name == rec.truth_text
        assert box_distance_km(rec.truth_box, region_box[rec.region_key]) == 0
        assert scene.setdefault(rec.region_key, rec.image_seed >> 32) == rec.image_seed >> 32
    assert len(set(scene.values())) == len(scene)


def test_synth_aliases_never_nest(small_world):
    names = [e.canonical_name.casefold() for e in small_world.gazetteer]
    assert not any(a != b and a in b for a in names for b in names)


def test_synth_infeasible_geometry():
    with pytest.raises(ValidationError):
        synth_world(4, 3, 10, seed=0, th=3000)
    with pytest.raises(ValidationError):
        synth_world(4, 1, 10, seed=0)
    with pytest.raises(ValidationError):
        synth_world(1, 2, 10, seed=0, k=2)


def test_split_partitions_deterministically(small_world):
    tr, te = split(small_world.dataset, 0.8, seed=3)
    assert len(tr) == 48 and len(te) == 12
    assert sorted(r.id for r in tr + te) == sorted(r.id for r in small_world.dataset)
    assert split(small_world.dataset, 0.8, seed=3) == (tr, te)
    tr99, te99 = split(small_world.dataset, 0.99, seed=3)
    assert (len(tr99), len(te99)) == (59, 1)


# config

def write_world_config(tmp_path, world, **extra):
    world.save(tmp_path)
    cfg = RunConfig(roster=tmp_path / "roster.json", gazetteer=tmp_path / "gazetteer.csv",
                    dataset=tmp_path / "dataset.jsonl")
    cfg = cfg.with_overrides(seed=5, **extra)
    write_config(tmp_path / "c.toml", cfg)
    return tmp_path / "c.toml"


def test_config_round_trip_and_overrides(tmp_path, small_world):
    path = write_world_config(tmp_path, small_world, z=4, epochs=3)
    cfg = load_config(path)
    assert cfg.seed == 5 and cfg.train.seed == 5
    assert cfg.discussion.z == 4 and cfg.train.epochs == 3
    over = cfg.with_overrides(k=3, retrieval_enabled=True, seed=9, th=None)
    assert (over.discussion.k, over.discussion.retrieval_enabled, over.seed, over.train.seed) == (3, True, 9, 9)
    assert over.discussion.th == cfg.discussion.th


def test_config_rejects_bad_input(tmp_path, small_world):
    path = write_world_config(tmp_path, small_world)
    text = path.read_text()
    path.write_text(text + "bogus = 1\n")
    with pytest.raises(ValidationError, match="bogus"):
        load_config(path)
    path.write_text(text.replace("roster.json", "nowhere.json"))
    with pytest.raises(ValidationError, match="roster"):
        load_config(path)
    path.write_text(text.replace("[discussion]", "[discussion]\nwidth = 3"))
    with pytest.raises(ValidationError, match="width"):
        load_config(path)
    path.write_text(text.replace("k = 2", "k = 20"))
    with pytest.raises(ValidationError, match="k=20"):
        load_config(path).build()


# evaluate

def test_oracle_roster_scores_one(small_world):
    roster = sim_roster(small_world, home_accuracy=1.0, away_accuracy=1.0, persuadability=0.0)
    rep = evaluate(DiscussionConfig(), roster, small_world.dataset, gazetteer=small_world.gazetteer)
    assert rep.accuracy == 1.0 and rep.n_failed == 0
    assert all(v["consensus"] and v["rounds_used"] == 1 for v in rep.verdicts)


def test_always_wrong_roster_scores_zero(small_world):
    roster = sim_roster(small_world, home_accuracy=0.0, away_accuracy=0.0)
    rep = evaluate(DiscussionConfig(), roster, small_world.dataset, gazetteer=small_world.gazetteer)
    assert rep.accuracy == 0.0


def test_debate_costs_more_than_pipeline(small_world):
    roster = sim_roster(small_world)
    cfg = DiscussionConfig(k=2, r=2, z=10)
    pipe = evaluate(cfg, roster, small_world.dataset[:20], gazetteer=small_world.gazetteer)
    debate = evaluate(cfg, roster, small_world.dataset[:20], gazetteer=small_world.gazetteer, mode="debate")
    for p, d in zip(pipe.verdicts, debate.verdicts):
        assert d["agent_calls"] == 8 * 10
        assert p["agent_calls"] == 2 * 2 + 2 * 2 + p["rounds_used"] * 2
        assert d["agent_calls"] > p["agent_calls"]


def test_report_aggregates_exactly(small_world):
    roster = sim_roster(small_world)
    train, test = split(small_world.dataset, 0.8, 0)
    rep = evaluate(DiscussionConfig(), roster, test, gazetteer=small_world.gazetteer, train_records=train)
    assert rep.accuracy == sum(v["correct"] for v in rep.verdicts) / len(test)
    assert rep.avg_tokens * len(test) == pytest.approx(sum(v["tokens_estimate"] for v in rep.verdicts), abs=1e-9)
    times = sorted(v["elapsed_ms"] for v in rep.verdicts)
    assert rep.rt_med_ms == times[(len(times) + 1) // 2 - 1]
    assert rep.coverage is not None and 0 <= rep.consistency <= 100


def test_nearest_rank_median():
    assert nearest_rank_median([3.0, 1.0, 2.0]) == 2.0
    assert nearest_rank_median([4.0, 1.0, 3.0, 2.0]) == 2.0
    assert nearest_rank_median([7.0]) == 7.0


def test_report_reruns_match_except_timing(small_world):
    roster = sim_roster(small_world)
    runs = [evaluate(DiscussionConfig(), roster, small_world.dataset[:15], gazetteer=small_world.gazetteer, seed=2)
            for _ in range(2)]
    a, b = (json.dumps(without_timing(r.to_dict()), sort_keys=True) for r in runs)
    assert a == b


def test_report_independent_of_sample_order(small_world):
    roster = sim_roster(small_world)
    recs = small_world.dataset[:12]
    fwd = evaluate(DiscussionConfig(), roster, recs, gazetteer=small_world.gazetteer, seed=4)
    rev = evaluate(DiscussionConfig(), roster, recs[::-1], gazetteer=small_world.gazetteer, seed=4)
    by_id = {v["id"]: without_timing(v) for v in rev.verdicts}
    assert all(without_timing(v) == by_id[v["id"]] for v in fwd.verdicts)
    assert fwd.accuracy == rev.accuracy and fwd.avg_tokens == rev.avg_tokens


def test_parallel_workers_match_serial(small_world):
    roster = sim_roster(small_world)
    recs = small_world.dataset[:10]
    serial = evaluate(DiscussionConfig(), roster, recs, gazetteer=small_world.gazetteer)
    par = evaluate(DiscussionConfig(max_workers=4), roster, recs, gazetteer=small_world.gazetteer)
    assert without_timing(serial.verdicts) == without_timing(par.verdicts)


class Mute:
    def __init__(self, i):
        self.id = AgentId(i, f"mute{i}")

    def __getattr__(self, name):
        from smilegeo.errors import AgentUnavailable

        def fail(*a, **k):
            raise AgentUnavailable("offline")
        return fail


def test_failed_samples_are_flagged(small_world):
    rep = evaluate(DiscussionConfig(k=1, r=1), [Mute(0), Mute(1)], small_world.dataset[:3],
                   gazetteer=small_world.gazetteer)
    assert rep.accuracy == 0 and rep.n_failed == 3 and rep.avg_tokens == 0
    assert all(v["failed"] for v in rep.verdicts)


def test_model_size_must_match_roster(small_world):
    with pytest.raises(ValidationError):
        evaluate(DiscussionConfig(), sim_roster(small_world), small_world.dataset[:1],
                 gazetteer=small_world.gazetteer, model=SelectionModel.init(3, 8, 8))


def test_solo_accuracy_tracks_profile():
    w = synth_world(4, 2, 300, seed=2)
    accs = solo_accuracies(sim_roster(w), w.dataset, gazetteer=w.gazetteer, th=50)
    # half of the images are home for each agent: 0.5 * 0.9 + 0.5 * 0.2
    assert all(abs(a - 0.55) < 0.1 for a in accs)


def test_report_json_round_trip(tmp_path, small_world):
    rep = evaluate(DiscussionConfig(), sim_roster(small_world), small_world.dataset[:5],
                   gazetteer=small_world.gazetteer)
    p = tmp_path / "r.json"
    p.write_text(rep.to_json())
    assert RunReport.load(p).to_dict() == rep.to_dict()
    with pytest.raises(ValidationError):
        RunReport.from_dict({"accuracy": 0.5})


# cli

def test_cli_synth_writes_three_files(tmp_path):
    assert main(["synth", "--agents", "8", "--regions", "4", "--samples", "500", "--seed", "7",
                 "--out", str(tmp_path / "world")]) == 0
    assert sorted(p.name for p in (tmp_path / "world").iterdir()) == ["dataset.jsonl", "gazetteer.csv", "roster.json"]
    assert len(ingest(tmp_path / "world" / "dataset.jsonl")) == 500


def test_cli_eval_train_report(tmp_path, small_world, capsys):
    cfg = write_world_config(tmp_path, small_world, l_rounds=2, epochs=2, lr=1e-3, d_k=8, d_h=8)
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path / "r.json"), "--z", "3"]) == 0
    rep = RunReport.load(tmp_path / "r.json")
    assert rep.config["discussion"]["z"] == 3 and rep.n_samples == 12
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "m.ckpt")]) == 0
    assert (tmp_path / "m.ckpt.history.json").exists()
    assert main(["eval", "--config", str(cfg), "--model", str(tmp_path / "m.ckpt"),
                 "--dataset", str(tmp_path / "dataset.jsonl"), "--retrieval", "on",
                 "--out", str(tmp_path / "r2.json")]) == 0
    rep2 = RunReport.load(tmp_path / "r2.json")
    assert rep2.n_samples == 60 and rep2.coverage is None and rep2.config["discussion"]["retrieval_enabled"]
    capsys.readouterr()
    assert main(["report", str(tmp_path / "r2.json")]) == 0
    assert "accuracy" in capsys.readouterr().out


def test_cli_exit_codes(tmp_path, small_world, capsys):
    cfg = write_world_config(tmp_path, small_world)
    assert main(["eval", "--config", str(cfg), "--frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err
    assert main(["launch"]) == 1
    assert main(["eval", "--config", str(tmp_path / "missing.toml")]) == 1
    assert main(["eval", "--config", str(cfg), "--retrieval", "maybe"]) == 1
    assert main(["eval", "--config", str(cfg), "--k", "0"]) == 1
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"junk")
    assert main(["eval", "--config", str(cfg), "--model", str(bad)]) == 1
    save_checkpoint(SelectionModel.init(8, 8, 8), tmp_path / "nan.ckpt")
    raw = bytearray((tmp_path / "nan.ckpt").read_bytes())
    raw[-8:] = np.array([np.nan]).tobytes()
    (tmp_path / "nan.ckpt").write_bytes(bytes(raw))
    assert main(["eval", "--config", str(cfg), "--model", str(tmp_path / "nan.ckpt")]) == 2


def test_cli_runtime_fault_exit_two(tmp_path, small_world):
    small_world.save(tmp_path)
    (tmp_path / "roster.json").write_text(json.dumps(
        {"agents": [{"name": "a", "endpoint": "http://127.0.0.1:9"}, {"name": "b", "endpoint": "http://127.0.0.1:9"}]}))
    cfg = RunConfig(roster=tmp_path / "roster.json", gazetteer=tmp_path / "gazetteer.csv",
                    dataset=tmp_path / "dataset.jsonl", timeout_s=0.5).with_overrides(k=1, r=1)
    write_config(tmp_path / "c.toml", cfg)
    # every sample fails; eval still reports them, training cannot proceed
    assert main(["eval", "--config", str(tmp_path / "c.toml"), "--out", str(tmp_path / "r.json")]) == 0
    assert RunReport.load(tmp_path / "r.json").n_failed == 12

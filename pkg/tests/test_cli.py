import json

import pytest

from conftest import make_graph
from tagforge.cli import main
from tagforge.graph import load_graph


def _base_graph():
    adj = {
        "1": ["2", "3"], "2": ["3"], "3": [],
        "4": ["5", "6"], "5": ["6"], "6": [],
        "7": ["1"],
    }
    labels = {"1": 0, "2": 0, "3": 0, "7": 0, "4": 1, "5": 1, "6": 1}
    return make_graph(adj, labels=labels, class_count=2)


@pytest.fixture
def graph_file(tmp_graph_file):
    return tmp_graph_file(_base_graph(), "base.json")


def _one_round_script(tmp_path, goal=False, score=9.0, name="script.json"):
    script = {
        "0": json.dumps({"mode": "semantic"}),
        "1": json.dumps([{
            "node_id": "new_node 1", "label": 0,
            "text": "a synthesized document body with plenty of characters",
            "neighbors": ["1", "2"]}]),
        "2": json.dumps([{"node_id": "new_node 1", "score": score}]),
        "3": json.dumps({"goal_reached": goal, "justification": "scripted"}),
    }
    path = tmp_path / name
    path.write_text(json.dumps(script), encoding="utf-8")
    return str(path)


# exit codes and argument errors -----------------------------------------------------

def test_unknown_subcommand_exits_2(capsys):
    assert main(["frobnicate"]) == 2
    assert "invalid choice" in capsys.readouterr().err


def test_unknown_flag_exits_2(capsys):
    assert main(["stats", "--bogus", "x"]) == 2


def test_no_arguments_exits_2():
    assert main([]) == 2


def test_missing_input_file_exits_2(tmp_path, capsys):
    missing = str(tmp_path / "nope.json")
    assert main(["stats", missing]) == 2
    assert "nope.json" in capsys.readouterr().err


def test_invalid_graph_json_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    assert main(["stats", str(bad)]) == 2


def test_schema_violation_exits_2(tmp_path, capsys):
    bad = tmp_path / "schema.json"
    bad.write_text(json.dumps({"class_count": 1, "nodes": [
        {"node_id": "a", "label": 0, "text": "t", "neighbors": ["ghost"],
         "mask": "Train"}]}), encoding="utf-8")
    assert main(["stats", str(bad)]) == 2
    assert "ghost" in capsys.readouterr().err


def test_bad_log_level_exits_2(capsys, graph_file):
    assert main(["--log-level", "noisy", "stats", graph_file]) == 2


# stats and analyze -------------------------------------------------------------------

def test_stats_prints_json_and_writes_report(capsys, graph_file, tmp_path):
    report = tmp_path / "stats.json"
    assert main(["stats", graph_file, "--report", str(report)]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["num_nodes"] == 7
    assert printed["num_edges"] == 7
    on_disk = json.loads(report.read_text(encoding="utf-8"))
    assert on_disk == printed


def test_analyze_reports_similarity(capsys, tmp_graph_file):
    a = tmp_graph_file(_base_graph(), "a.json")
    b = tmp_graph_file(_base_graph(), "b.json")
    assert main(["analyze", a, b]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["clustering_similarity"] == pytest.approx(1.0)
    assert printed["label_homogeneity"] == pytest.approx(1.0)
    assert printed["degree_ks"]["statistic"] == 0.0


# limit -------------------------------------------------------------------------------

def test_limit_writes_output_and_sidecar(capsys, graph_file, tmp_path):
    out = tmp_path / "sampled.json"
    assert main(["limit", graph_file, str(out), "--alpha", "0.5"]) == 0
    sampled = load_graph(str(out))
    assert sampled.num_nodes == 3
    sidecar = json.loads((tmp_path / "sampled.json.limits.json")
                         .read_text(encoding="utf-8"))
    assert set(sidecar) == {"original", "sample", "repair", "cell_targets", "config"}
    assert sidecar["config"]["alpha"] == 0.5
    assert sidecar["config"]["seed"] == 0
    assert all(":" in key for key in sidecar["cell_targets"])
    assert sum(sidecar["cell_targets"].values()) == 3
    assert sidecar["repair"]["final_distortion"] <= sidecar["repair"]["initial_distortion"]


def test_limit_custom_sidecar_path(graph_file, tmp_path):
    out = tmp_path / "s.json"
    side = tmp_path / "custom.json"
    assert main(["limit", graph_file, str(out), "--alpha", "0.5",
                 "--sidecar", str(side)]) == 0
    assert side.exists()
    assert not (tmp_path / "s.json.limits.json").exists()


def test_limit_alpha_flag_overrides_config(graph_file, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"limiter": {"alpha": 0.9}}), encoding="utf-8")
    out = tmp_path / "s.json"
    assert main(["limit", graph_file, str(out), "--config", str(cfg),
                 "--alpha", "0.5"]) == 0
    assert load_graph(str(out)).num_nodes == 3


def test_limit_config_alpha_used_without_flag(graph_file, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"limiter": {"alpha": 1.0}}), encoding="utf-8")
    out = tmp_path / "s.json"
    assert main(["limit", graph_file, str(out), "--config", str(cfg)]) == 0
    assert load_graph(str(out)).num_nodes == 7


def test_unknown_limiter_config_key_exits_2(graph_file, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"limiter": {"alhpa": 0.5}}), encoding="utf-8")
    assert main(["limit", graph_file, str(tmp_path / "o.json"),
                 "--config", str(cfg)]) == 2
    assert "alhpa" in capsys.readouterr().err


def test_unknown_config_section_exits_2(graph_file, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"sampler": {}}), encoding="utf-8")
    assert main(["limit", graph_file, str(tmp_path / "o.json"),
                 "--config", str(cfg)]) == 2
    assert "sampler" in capsys.readouterr().err


# synthesize --------------------------------------------------------------------------

def test_synthesize_requires_provider(graph_file, tmp_path, capsys):
    assert main(["synthesize", graph_file, str(tmp_path / "o.json")]) == 2
    assert "--provider" in capsys.readouterr().err


def test_synthesize_bad_provider_spec(graph_file, tmp_path):
    assert main(["synthesize", graph_file, str(tmp_path / "o.json"),
                 "--provider", "bogus"]) == 2
    assert main(["synthesize", graph_file, str(tmp_path / "o.json"),
                 "--provider", "mock:"]) == 2


def test_synthesize_mock_run_grows_graph(graph_file, tmp_path):
    script = _one_round_script(tmp_path)
    out = tmp_path / "grown.json"
    code = main(["synthesize", graph_file, str(out),
                 "--provider", f"mock:{script}",
                 "--config", _max_iters_config(tmp_path)])
    assert code == 0
    grown = load_graph(str(out))
    assert grown.num_nodes == 8
    assert grown.has_node("new_node 1")
    audit_lines = (tmp_path / "grown.json.audit.jsonl").read_text(
        encoding="utf-8").splitlines()
    kinds = [json.loads(line)["kind"] for line in audit_lines]
    assert kinds[0] == "effective_config"
    assert "run_start" in kinds and "run_end" in kinds


def _max_iters_config(tmp_path, name="maxiter.json"):
    cfg = tmp_path / name
    cfg.write_text(json.dumps({"synthesis": {"max_iterations": 1}}),
                   encoding="utf-8")
    return str(cfg)


def test_synthesize_mock_determinism_byte_identical(graph_file, tmp_path):
    script = _one_round_script(tmp_path)
    cfg = _max_iters_config(tmp_path)
    outs, audits = [], []
    for tag in ("one", "two"):
        out = tmp_path / f"{tag}.json"
        audit = tmp_path / f"{tag}.audit.jsonl"
        assert main(["synthesize", graph_file, str(out),
                     "--provider", f"mock:{script}", "--config", cfg,
                     "--seed", "5", "--audit", str(audit)]) == 0
        outs.append(out.read_bytes())
        audits.append(audit.read_bytes())
    assert outs[0] == outs[1]
    assert audits[0] == audits[1]


def test_synthesize_provider_failure_exits_3(graph_file, tmp_path, capsys):
    empty_script = tmp_path / "empty.json"
    empty_script.write_text("{}", encoding="utf-8")
    out = tmp_path / "o.json"
    code = main(["synthesize", graph_file, str(out),
                 "--provider", f"mock:{empty_script}"])
    assert code == 3
    assert "provider failure" in capsys.readouterr().err
    # graph grown so far and audit still land on disk
    assert load_graph(str(out)).num_nodes == 7
    assert (tmp_path / "o.json.audit.jsonl").exists()


def test_synthesize_require_convergence_exits_4(graph_file, tmp_path, capsys):
    script = _one_round_script(tmp_path, goal=False)
    out = tmp_path / "o.json"
    code = main(["synthesize", graph_file, str(out),
                 "--provider", f"mock:{script}",
                 "--config", _max_iters_config(tmp_path),
                 "--require-convergence"])
    assert code == 4
    assert "convergence" in capsys.readouterr().err
    assert out.exists()


def test_synthesize_seed_flag_beats_config_seed(graph_file, tmp_path):
    script = _one_round_script(tmp_path)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 11, "synthesis": {"max_iterations": 1}}),
                   encoding="utf-8")
    out = tmp_path / "o.json"
    audit = tmp_path / "a.jsonl"
    assert main(["synthesize", graph_file, str(out), "--provider",
                 f"mock:{script}", "--config", str(cfg), "--seed", "3",
                 "--audit", str(audit)]) == 0
    first = json.loads(audit.read_text(encoding="utf-8").splitlines()[0])
    assert first["seed"] == 3

    out2 = tmp_path / "o2.json"
    audit2 = tmp_path / "a2.jsonl"
    assert main(["synthesize", graph_file, str(out2), "--provider",
                 f"mock:{script}", "--config", str(cfg),
                 "--audit", str(audit2)]) == 0
    first2 = json.loads(audit2.read_text(encoding="utf-8").splitlines()[0])
    assert first2["seed"] == 11


def test_synthesize_config_overrides_land_in_audit(graph_file, tmp_path):
    script = _one_round_script(tmp_path)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(
        {"synthesis": {"max_iterations": 1, "capsule_size": 4}}), encoding="utf-8")
    out = tmp_path / "o.json"
    audit = tmp_path / "a.jsonl"
    assert main(["synthesize", graph_file, str(out), "--provider",
                 f"mock:{script}", "--config", str(cfg),
                 "--audit", str(audit)]) == 0
    first = json.loads(audit.read_text(encoding="utf-8").splitlines()[0])
    assert first["synthesis"]["capsule_size"] == 4
    assert first["synthesis"]["max_iterations"] == 1


def test_unknown_synthesis_config_key_exits_2(graph_file, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"synthesis": {"capsul_size": 4}}), encoding="utf-8")
    assert main(["synthesize", graph_file, str(tmp_path / "o.json"),
                 "--provider", "live", "--config", str(cfg)]) == 2
    assert "capsul_size" in capsys.readouterr().err


# dry run -----------------------------------------------------------------------------

def test_dry_run_prints_prompts_without_provider(graph_file, tmp_path, capsys):
    out = tmp_path / "never_written.json"
    code = main(["synthesize", graph_file, str(out), "--dry-run",
                 "--provider", "mock:/path/that/does/not/exist.json"])
    assert code == 0
    printed = capsys.readouterr().out
    assert "=== Manager prompt" in printed
    assert "=== Enhancement prompt" in printed
    assert "--- system ---" in printed
    assert not out.exists()


def test_dry_run_without_provider_flag(graph_file, tmp_path):
    assert main(["synthesize", graph_file, str(tmp_path / "o.json"),
                 "--dry-run"]) == 0


# coherence ---------------------------------------------------------------------------

def _embeddings_file(tmp_path, ids, dim=3):
    table = {}
    for k, nid in enumerate(ids):
        vec = [0.0] * dim
        vec[k % dim] = 1.0
        vec[0] += 0.5
        table[nid] = vec
    path = tmp_path / "emb.json"
    path.write_text(json.dumps(table), encoding="utf-8")
    return str(path)


def test_coherence_with_graph_background_and_id_array(graph_file, tmp_path, capsys):
    ids = [str(i) for i in range(1, 8)]
    emb = _embeddings_file(tmp_path, ids + ["c1", "c2"])
    candidates = tmp_path / "cands.json"
    candidates.write_text(json.dumps(["c1", "c2"]), encoding="utf-8")
    assert main(["coherence", "--background", graph_file,
                 "--candidates", str(candidates), "--embeddings", emb]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["background_size"] == 7
    assert printed["sample_size"] == 2
    assert set(printed["scores"]) == {"c1", "c2"}
    assert 0.0 <= printed["mean"] <= 1.0


def test_coherence_missing_embedding_exits_2(graph_file, tmp_path, capsys):
    emb = _embeddings_file(tmp_path, ["1", "2"])
    cands = tmp_path / "c.json"
    cands.write_text(json.dumps(["zz"]), encoding="utf-8")
    assert main(["coherence", "--background", graph_file,
                 "--candidates", str(cands), "--embeddings", emb]) == 2
    assert "missing" in capsys.readouterr().err


def test_coherence_rejects_non_list_candidates(graph_file, tmp_path):
    emb = _embeddings_file(tmp_path, ["1"])
    cands = tmp_path / "c.json"
    cands.write_text(json.dumps({"ids": ["1"]}), encoding="utf-8")
    assert main(["coherence", "--background", graph_file,
                 "--candidates", str(cands), "--embeddings", emb]) == 2

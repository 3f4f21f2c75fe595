import os
import subprocess
import sys

import pytest

from bbkit.cli import main
from bbkit.report import read_profiles, read_responses, read_tsv

SCENARIO = """
[campaign]
rounds = 2
noise_pps = 5
seed = 21

[[population]]
protocol = "DNS"
count = 30
prefix = "10.40.0.0/16"

[[population]]
protocol = "TCP80"
count = 30
prefix = "10.41.0.0/16"

[[generator]]
ip = "10.42.0.1"
protocol = "NTP"
timing = { kind = "constant", rate = 20, duration = 3 }
"""

ASN = "10.40.0.0/16,64500\n10.41.0.0/16,64501\n"
GEO = "10.40.0.0/16,NL\n10.0.0.0/8,US\n"


@pytest.fixture
def scenario(tmp_path):
    (tmp_path / "s.toml").write_text(SCENARIO)
    (tmp_path / "asn.csv").write_text(ASN)
    (tmp_path / "geo.csv").write_text(GEO)
    (tmp_path / "run.toml").write_text(
        '[inputs]\nscenario = "s.toml"\nasn_dataset = "asn.csv"\ngeo_dataset = "geo.csv"\n'
        '[output]\ndir = "out"\n'
    )
    return tmp_path


def test_run_writes_tables_figures_and_manifest(scenario):
    assert main(["run", "--config", str(scenario / "run.toml")]) == 0
    out = scenario / "out"
    _, rows, comments = read_tsv(open(out / "manifest.tsv"))
    paths = {r[0] for r in rows}
    for name in ("table1.tsv", "table2.tsv", "table4.tsv", "table3.tsv", "stability.tsv", "loops.tsv",
                 "attack.tsv", "profiles.tsv", "figures/stability.png", "figures/stability.dat",
                 "figures/attack.png", "figures/loops.dat", "figures/timing.png", "figures/concentration-DNS.dat"):
        assert name in paths, name
    assert not (out / ".partial").exists()
    assert comments[-1].startswith("bbkit ")
    table1 = (out / "table1.tsv").read_text().splitlines()
    assert table1[0].startswith("protocol\t") and table1[-1].startswith("# bbkit ") and "s.toml" not in table1[-1]


def test_run_twice_same_manifest(scenario):
    assert main(["run", "--config", str(scenario / "run.toml"), "--out-dir", str(scenario / "a")]) == 0
    assert main(["run", "--config", str(scenario / "run.toml"), "--out-dir", str(scenario / "b")]) == 0
    assert (scenario / "a/manifest.tsv").read_bytes() == (scenario / "b/manifest.tsv").read_bytes()


def test_stages_match_pipeline(scenario):
    assert main(["run", "--config", str(scenario / "run.toml")]) == 0
    out = scenario / "out"
    data = out / "data"
    solo = scenario / "solo"
    solo.mkdir()
    assert main(["match", "--probes", str(data / "ledger-DNS-r1.csv"), "--packets", str(data / "trace-DNS-r1.pkt"),
                 "--out", str(solo / "DNS-r1.csv")]) == 0
    assert (solo / "DNS-r1.csv").read_bytes() == (out / "responses/DNS-r1.csv").read_bytes()
    assert main(["classify", "--responses", str(solo / "DNS-r1.csv"), "--probes", str(data / "ledger-DNS-r1.csv"),
                 "--round", "1", "--out", str(solo / "p1.tsv")]) == 0
    solo_profs, _ = read_profiles(open(solo / "p1.tsv"))
    piped, _ = read_profiles(open(out / "profiles.tsv"))
    expected = [(p.generator_ip, p.rounds[1]) for p in piped if p.protocol.value == "DNS" and 1 in p.rounds]
    assert [(p.generator_ip, p.rounds[1]) for p in solo_profs] == expected


def test_stage_chain(scenario):
    d = scenario / "syn"
    assert main(["synth", "--scenario", str(scenario / "s.toml"), "--out-dir", str(d)]) == 0
    profiles = []
    resp = []
    for rid in range(3):
        ledger, trace = d / f"ledger-TCP80-r{rid}.csv", d / f"trace-TCP80-r{rid}.pkt"
        assert main(["match", "--probes", str(ledger), "--packets", str(trace), "--out", str(d / f"m{rid}.csv")]) == 0
        assert main(["classify", "--responses", str(d / f"m{rid}.csv"), "--probes", str(ledger), "--round", str(rid),
                     "--out", str(d / f"p{rid}.tsv")]) == 0
        profiles.append(str(d / f"p{rid}.tsv"))
        resp.append(str(d / f"m{rid}.csv"))
    rows, footer = read_responses(open(d / "m1.csv"))
    n_packets = sum(1 for _ in open(d / "trace-TCP80-r1.pkt"))
    assert int(footer["matched"].split()[0]) + int(footer["unmatched"].split()[0]) == n_packets
    assert len(rows) == int(footer["matched"].split()[0])
    for cmd in (
        ["summarize", "--profiles", *profiles, "--out", str(d / "summary.tsv")],
        ["stability", "--profiles", *profiles, "--out", str(d / "stab.tsv"), "--no-plots"],
        ["concentration", "--profiles", *profiles, "--protocol", "tcp80", "--out", str(d / "conc.tsv")],
        ["origins", "--profiles", *profiles, "--asn", str(scenario / "asn.csv"), "--geo", str(scenario / "geo.csv"),
         "--out", str(d / "orig.tsv")],
        ["loops", "--paths", str(d / "traceroutes.txt"), "--out", str(d / "loops.tsv")],
        ["timing", "--responses", resp[0], "--probes", str(d / "ledger-TCP80-r0.csv"), "--out", str(d / "timing.tsv")],
        ["attack-sim", "--responses", resp[1], "--probes", str(d / "ledger-TCP80-r1.csv"), "--out", str(d / "atk.tsv")],
    ):
        assert main(cmd) == 0, cmd
    assert (d / "summary-table1.tsv").exists() and (d / "conc.png").exists() and not (d / "stab.png").exists()
    # truth written by synth agrees with what classify recovered
    _, truth, _ = read_tsv(open(d / "truth.tsv"))
    want = {(r[0], int(r[3])) for r in truth if r[1] == "TCP80" and r[2] == "0"}
    got, _ = read_profiles(open(d / "p0.tsv"))
    assert {(p.generator_ip, p.packets(0)) for p in got} == want


def test_probe_and_emit(tmp_path):
    targets = tmp_path / "t.txt"
    targets.write_text("10.9.0.1\n10.9.0.2\n")
    out = tmp_path / "l.csv"
    assert main(["probe", "--protocol", "dns", "--targets", str(targets), "--rate", "10", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 2
    assert main(["probe", "--protocol", "icmp", "--targets", "full", "--limit", "50", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 50
    assert main(["probe", "--protocol", "dns", "--targets", str(targets), "--out", str(out), "--emit",
                 "--allow-prefix", "192.168.0.0/16"]) == 2
    assert main(["probe", "--protocol", "dns", "--targets", str(targets), "--out", str(out), "--emit",
                 "--allow-prefix", "10.9.0.0/16"]) == 0
    assert (tmp_path / "l.csv.pcap").exists()


def test_exit_codes(tmp_path):
    assert main(["run", "--config", str(tmp_path / "missing.toml")]) == 2
    cfg = tmp_path / "c.toml"
    cfg.write_text('[[inputs.round]]\nprotocol = "DNS"\nround = 0\nledger = "nope.csv"\ntrace = "nope.pkt"\n')
    assert main(["run", "--config", str(cfg)]) == 2
    ledger = tmp_path / "l.csv"
    ledger.write_text("0,10.0.0.1,NTP,-,90\n")
    pk = tmp_path / "p.pkt"
    pk.write_text("")
    assert main(["match", "--probes", str(ledger), "--packets", str(pk), "--window-secs", "0",
                 "--out", str(tmp_path / "o.csv")]) == 2
    orphan = tmp_path / "r.csv"
    orphan.write_text("10.0.0.9,NTP,PA2,5,10.0.0.9,76,in_protocol\n")
    assert main(["classify", "--responses", str(orphan), "--probes", str(ledger), "--round", "0",
                 "--out", str(tmp_path / "p.tsv")]) == 3
    assert main(["synth", "--preset", "nope", "--out-dir", str(tmp_path / "x")]) == 2


def test_missing_path_named_in_error(tmp_path, caplog):
    cfg = tmp_path / "c.toml"
    cfg.write_text('[[inputs.round]]\nprotocol = "DNS"\nround = 0\nledger = "l.csv"\ntrace = "gone.pcap"\n')
    (tmp_path / "l.csv").write_text("")
    assert main(["run", "--config", str(cfg)]) == 2
    assert "gone.pcap" in caplog.text


def test_partial_marker_left_on_failure(tmp_path):
    (tmp_path / "l.csv").write_text("0,10.0.0.1,NTP,-,90\n")
    (tmp_path / "t.pkt").write_text("")
    cfg = tmp_path / "c.toml"
    # the ledger holds NTP probes but the round claims DNS
    cfg.write_text('[[inputs.round]]\nprotocol = "DNS"\nround = 0\nledger = "l.csv"\ntrace = "t.pkt"\n'
                   '[output]\ndir = "o"\n')
    assert main(["run", "--config", str(cfg)]) == 3
    assert (tmp_path / "o/.partial").exists() and not (tmp_path / "o/manifest.tsv").exists()


def test_log_level_from_environment(tmp_path):
    env = dict(os.environ, BBKIT_LOG="INFO")
    r = subprocess.run([sys.executable, "-m", "bbkit.cli", "synth", "--preset", "anecdote-103-40-65-97",
                        "--rounds", "0", "--out-dir", str(tmp_path)], env=env, capture_output=True, text=True)
    assert r.returncode == 0 and "INFO" in r.stderr
    r = subprocess.run([sys.executable, "-m", "bbkit.cli", "--log-level", "ERROR", "synth", "--preset",
                        "anecdote-103-40-65-97", "--rounds", "0", "--out-dir", str(tmp_path)],
                       env=env, capture_output=True, text=True)
    assert r.returncode == 0 and "INFO" not in r.stderr

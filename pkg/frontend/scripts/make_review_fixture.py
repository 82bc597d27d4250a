"""Build a 120-packet review bundle (3 bins x 40, 20 per direction) for the
console end-to-end test: blinded packets, token map, server config, and a
test-side meta file holding the per-token model probabilities so the DOM
blinding scan knows exactly which values must never appear."""

import argparse
import json
from pathlib import Path

from phenoaudit.audit import (
    BIN_HIGH,
    BIN_LOW,
    BIN_MEDIUM,
    DIR_CODED,
    DIR_UNCODED,
    DiscordantCase,
    StratifiedSample,
    build_review_packets,
    save_discordant,
    save_packets,
    save_token_map,
)
from phenoaudit.features import PatientHistory
from phenoaudit.rng import derive_rng
from phenoaudit.server import write_server_config
from phenoaudit.synth import CohortConfig, generate_cohort

SEGMENTS = {
    (BIN_HIGH, DIR_CODED): (0.01, 0.149),
    (BIN_HIGH, DIR_UNCODED): (0.851, 0.99),
    (BIN_MEDIUM, DIR_CODED): (0.15, 0.299),
    (BIN_MEDIUM, DIR_UNCODED): (0.701, 0.85),
    (BIN_LOW, DIR_CODED): (0.30, 0.499),
    (BIN_LOW, DIR_UNCODED): (0.501, 0.70),
}


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", required=True)
    parser.add_argument("--seed", type=int, default=20)
    parser.add_argument("--per-direction", type=int, default=20)
    parser.add_argument("--port", type=int, default=8461)
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    encounters, ledger = generate_cohort(CohortConfig(n_patients=1500, seed=args.seed))
    history = PatientHistory(encounters)
    coded_pool = [e for e in encounters if e.coded_diabetic]
    uncoded_pool = [e for e in encounters if not e.coded_diabetic]

    rng = derive_rng(args.seed, "fixture-p")
    cases = []
    taken_coded = taken_uncoded = 0
    for (bin_name, direction), (lo, hi) in SEGMENTS.items():
        for _ in range(args.per_direction):
            if direction == DIR_CODED:
                enc = coded_pool[taken_coded]
                taken_coded += 1
                coded = True
            else:
                enc = uncoded_pool[taken_uncoded]
                taken_uncoded += 1
                coded = False
            p = round(float(rng.uniform(lo, hi)), 4)
            cases.append(DiscordantCase(enc.encounter_id, p, coded, direction, bin_name))

    sample = StratifiedSample(cases=cases)
    by_id = {e.encounter_id: e for e in encounters}
    packets, token_map = build_review_packets(sample, by_id, history, seed=args.seed)

    save_packets(packets, out / "packets.jsonl")
    save_token_map(token_map, out / "token_map.csv")
    save_discordant(cases, out / "discordant.csv")
    write_server_config(
        out / "server.json",
        packets="packets.jsonl",
        log="judgments.jsonl",
        reviewers={"console-reviewer": "tok-console"},
        owner_token="tok-owner",
        token_map="token_map.csv",
        discordant="discordant.csv",
        port=args.port,
    )
    case_by_id = {c.encounter_id: c for c in cases}
    meta = {
        "n_packets": len(packets),
        "reviewer_token": "tok-console",
        "p_by_token": {tok: case_by_id[eid].p for tok, eid in token_map.items()},
        "bin_by_token": {tok: case_by_id[eid].bin for tok, eid in token_map.items()},
    }
    (out / "fixture_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    print(f"fixture ready: {len(packets)} packets in {out}")


if __name__ == "__main__":
    main()

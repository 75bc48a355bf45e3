"""
Per-agent send/receive counts of an exported communication ledger.

Usage:
    python scripts/analysis/ledger_degrees.py trace/ledger.csv -o trace/degrees.csv
"""

import argparse
import os
import sys

import pandas as pd

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", ".."))

from dagcomm.comms import CommLedger, degree_table  # noqa: E402


def analyze_ledger(input_file, output_file=None):
    ledger_df = pd.read_csv(input_file)
    missing = [c for c in CommLedger.COLUMNS if c not in ledger_df.columns]
    if missing:
        raise ValueError(f"{input_file} is missing ledger columns: {', '.join(missing)}")
    print(f"Loaded ledger with {len(ledger_df)} transmissions.")

    table = degree_table(ledger_df)
    n_episodes = ledger_df['episode'].nunique()

    print("\n=== LEDGER DEGREE ANALYSIS ===")
    print(f"\nEpisodes with communication: {n_episodes}")
    if n_episodes:
        print(f"Transmissions per episode: {len(ledger_df) / n_episodes:.2f}")
    print(f"\nTransmissions per round:")
    print(ledger_df['round'].value_counts().sort_index())
    print(f"\nPer-agent degrees:")
    print(table.to_string(index=False))

    silent = table[table['sent'] == 0]
    print(f"\nAgents that never send: {len(silent)}")

    if output_file:
        table.to_csv(output_file, index=False)
        print(f"\nDegree table saved to: {output_file}")
    return table


def main():
    parser = argparse.ArgumentParser(
        description='Count transmissions sent and received per agent in a ledger CSV'
    )
    parser.add_argument(
        'input_file',
        help='Path to a ledger CSV with episode, step, round, sender and receiver columns'
    )
    parser.add_argument(
        '-o', '--output',
        help='Path to output CSV file (if not specified, only prints the table)',
        default=None
    )

    args = parser.parse_args()

    try:
        analyze_ledger(args.input_file, args.output)
    except Exception as e:
        print(f"Error: {e}")
        return 1

    return 0


if __name__ == "__main__":
    exit(main())

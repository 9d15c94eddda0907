"""
Ledger migration script - creates the study_runs and estimates tables.
Run once against LATTICEGP_DATABASE_URL (or ./runs/ledger.db when unset).
"""
import sys

from latticegp.database import init_ledger

out = sys.argv[1] if len(sys.argv) > 1 else "runs"

print("🔄 Creating ledger tables...")

# create_all skips tables that already exist
engine = init_ledger(out)

print("✅ Ledger migration completed!")
print(f"✅ study_runs / estimates ready at {engine.url}")
print("\nYou can now:")
print("  - Run a study via python -m latticegp rmsd-study --config study.json")

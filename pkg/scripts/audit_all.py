"""Print the audit breakdown of every shipped config and the reference comparison.

    python3 scripts/audit_all.py
"""

from conformer import load_config
from conformer.audit import audit, audit_compare, format_compare
from conformer.config import CANONICAL


def main() -> None:
    for name in CANONICAL:
        print(audit(load_config(name)).format())
        print()
    rows = audit_compare("reference")
    print(format_compare(rows))
    required = [r for r in rows if r.required]
    print(f"\n{sum(r.passed for r in required)}/{len(required)} required reference cells within tolerance, "
          f"{sum(r.passed for r in rows if not r.required)}/{len(rows) - len(required)} informational")


if __name__ == "__main__":
    main()

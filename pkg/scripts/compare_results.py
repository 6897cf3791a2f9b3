#!/usr/bin/env python3
"""
Compare the curve CSVs of two run directories in one Excel workbook.

Each curve present in either run gets its own sheet, pivoted to
axis_value x series, with the two runs' values side by side and their
difference. A "manifests" sheet lists both runs' command, seed and
checkpoint hashes.

Usage:
    python scripts/compare_results.py <run_dir1> <run_dir2> [-o output.xlsx]
"""

import argparse
import json
import sys
from pathlib import Path

try:
    import pandas as pd
    from openpyxl import load_workbook
    from openpyxl.styles import Font
except ImportError as e:
    print(f"ERROR: Missing required dependency: {e}", file=sys.stderr)
    print("Install with: pip install pandas openpyxl", file=sys.stderr)
    sys.exit(1)


CURVE_COLUMNS = ["schema_version", "kind", "axis_name", "axis_value", "series", "value", "count"]


def validate_run_dir(path: Path) -> Path:
    """Validate the run directory has a manifest."""
    if not path.exists():
        raise FileNotFoundError(f"Directory not found: {path}")
    if not path.is_dir():
        raise ValueError(f"Path is not a directory: {path}")
    manifest = path / "manifest.json"
    if not manifest.exists():
        raise FileNotFoundError(f"manifest.json not found in: {path}")
    return manifest


def curve_files(run_dir: Path) -> dict:
    """Curve CSVs in a run, keyed by file stem."""
    found = {}
    for csv_path in sorted(run_dir.glob("*.csv")):
        header = pd.read_csv(csv_path, nrows=0).columns.tolist()
        if header == CURVE_COLUMNS:
            found[csv_path.stem] = csv_path
    return found


def pivot_curve(csv_path: Path) -> pd.DataFrame:
    df = pd.read_csv(csv_path)
    return df.pivot(index="axis_value", columns="series", values="value")


def compare_curve(name: str, path1, path2, label1: str, label2: str) -> pd.DataFrame:
    frames = []
    if path1 is not None:
        frames.append(pivot_curve(path1).add_suffix(f" [{label1}]"))
    if path2 is not None:
        frames.append(pivot_curve(path2).add_suffix(f" [{label2}]"))
    combined = pd.concat(frames, axis=1)

    if path1 is not None and path2 is not None:
        left = pivot_curve(path1)
        right = pivot_curve(path2)
        for series in sorted(set(left.columns) & set(right.columns)):
            combined[f"{series} [diff]"] = right[series] - left[series]
    return combined.sort_index(axis=1).reset_index()


def manifest_summary(manifest_path: Path) -> dict:
    raw = json.loads(manifest_path.read_text(encoding="utf-8"))
    return {
        "run_id": raw.get("run_id"),
        "command": raw.get("command"),
        "dataset": raw.get("dataset"),
        "seed": raw.get("seed"),
        "created_at": raw.get("created_at"),
        "checkpoint_hashes": ", ".join(f"{k}={v[:12]}" for k, v in raw.get("checkpoint_hashes", {}).items()),
    }


def main():
    parser = argparse.ArgumentParser(
        description="Compare the curve CSVs of two run directories in Excel format",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python scripts/compare_results.py runs/2026-10-18_141502 runs/2026-10-18_153010
  python scripts/compare_results.py runs/seed0 runs/seed1 -o comparison.xlsx
        """
    )
    parser.add_argument("dir1", help="First run directory path")
    parser.add_argument("dir2", help="Second run directory path")
    parser.add_argument(
        "-o", "--output",
        help="Output Excel file path (default: compare_<dir1>_<dir2>.xlsx)",
        default=None
    )

    args = parser.parse_args()

    try:
        dir1, dir2 = Path(args.dir1), Path(args.dir2)
        manifest1 = validate_run_dir(dir1)
        manifest2 = validate_run_dir(dir2)
        curves1 = curve_files(dir1)
        curves2 = curve_files(dir2)
        names = sorted(set(curves1) | set(curves2))
        if not names:
            raise ValueError("Neither run directory contains curve CSVs")

        if args.output:
            output_path = Path(args.output)
        else:
            output_path = Path(f"compare_{dir1.name.replace(' ', '_')}_{dir2.name.replace(' ', '_')}.xlsx")

        print(f"Creating Excel workbook: {output_path}")
        with pd.ExcelWriter(output_path, engine="openpyxl") as writer:
            pd.DataFrame([manifest_summary(manifest1), manifest_summary(manifest2)]).to_excel(
                writer, sheet_name="manifests", index=False)
            for name in names:
                sheet = compare_curve(name, curves1.get(name), curves2.get(name), dir1.name, dir2.name)
                # Excel limit: 31 chars per sheet name
                sheet.to_excel(writer, sheet_name=name[:31], index=False)
                print(f"  {name}: {len(sheet)} rows")

        wb = load_workbook(output_path)
        for sheet_name in wb.sheetnames:
            ws = wb[sheet_name]
            ws.freeze_panes = "A2"
            for cell in ws[1]:
                cell.font = Font(bold=True)
        wb.save(output_path)

        print(f"✓ Created comparison Excel file: {output_path} ({len(names)} curves)")

    except (FileNotFoundError, ValueError) as e:
        print(f"ERROR: {e}", file=sys.stderr)
        sys.exit(1)
    except Exception as e:
        print(f"ERROR: {e}", file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    main()

"""Golden data for the benchmark figures and its verification.

The golden directory holds one CSV per recipe and ``manifest.toml``, which
lists for every figure either the CLI command regenerating its data or a
``qualitative`` note when the figure carries no reproducible numbers.  A
recipe entry looks like::

    [[recipe]]
    name = "fig02-vdp"
    figure = 2
    command = ["sweep", "vdp"]
    csv = "fig02_vdp.csv"
    rtol = { kappa = 0.05, gamma = 0.05, sigma = 0.05 }
    ignore = ["eta_star_*"]
    monotone = true          # sigma strictly increasing over the ok rows
    slope = [0.85, 1.15]     # window for the log-log slope of sigma

Columns neither toleranced nor ignored must match exactly as text.
"""

from __future__ import annotations

import fnmatch
import io
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .export import read_csv
from .problem import tomllib

GOLDEN_DIR = Path(__file__).with_name("goldens")
MANIFEST = "manifest.toml"


@dataclass
class Recipe:
    name: str
    figure: int
    command: list = field(default_factory=list)
    csv: str = ""
    rtol: dict = field(default_factory=dict)
    ignore: list = field(default_factory=list)
    monotone: bool = False
    monotone_rows: Optional[int] = None
    slope: Optional[tuple] = None
    qualitative: str = ""

    @property
    def runnable(self) -> bool:
        return not self.qualitative


def load_manifest(directory=None) -> list:
    directory = Path(directory or GOLDEN_DIR)
    with open(directory / MANIFEST, "rb") as fh:
        data = tomllib.load(fh)
    recipes = []
    for entry in data.get("recipe", []):
        entry = dict(entry)
        if "slope" in entry:
            entry["slope"] = tuple(entry["slope"])
        recipes.append(Recipe(**entry))
    return recipes


@dataclass
class Mismatch:
    recipe: str
    column: str
    row: int
    expected: str
    got: str

    def __str__(self) -> str:
        where = f"row {self.row}" if self.row >= 0 else "table"
        return f"{self.recipe}: {self.column} ({where}): expected {self.expected}, got {self.got}"


@dataclass
class RecipeResult:
    recipe: Recipe
    mismatches: list = field(default_factory=list)
    error: str = ""

    @property
    def passed(self) -> bool:
        return not self.error and not self.mismatches


@dataclass
class GoldenSummary:
    results: list

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def text(self) -> str:
        lines = []
        for r in self.results:
            rec = r.recipe
            if not rec.runnable:
                lines.append(f"fig {rec.figure:2d} {rec.name}: qualitative only ({rec.qualitative})")
                continue
            lines.append(f"fig {rec.figure:2d} {rec.name}: {'pass' if r.passed else 'FAIL'}")
            if r.error:
                lines.append(f"    error: {r.error}")
            lines.extend(f"    {m}" for m in r.mismatches)
        ok = sum(r.passed for r in self.results if r.recipe.runnable)
        total = sum(r.recipe.runnable for r in self.results)
        lines.append(f"{ok}/{total} recipes passed")
        return "\n".join(lines) + "\n"


def run_recipe(recipe: Recipe, out_path, extra_args: Sequence[str] = ()) -> None:
    """Run the recipe command through the CLI, writing its CSV to ``out_path``."""
    from .cli import main

    argv = list(recipe.command) + list(extra_args) + ["-o", str(out_path)]
    code = main(argv, out=io.StringIO())
    if code != 0:
        raise RuntimeError(f"'stiffkit {' '.join(argv)}' exited with {code}")


def _ignored(recipe: Recipe, column: str) -> bool:
    return any(fnmatch.fnmatchcase(column, pat) for pat in recipe.ignore)


def _number(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        return math.nan


def _sigma_checks(recipe: Recipe, header, rows) -> list:
    out = []
    if "sigma" not in header:
        return out
    i = header.index("sigma")
    ok = [r for r in rows if r[-1] == "ok"]
    if recipe.monotone:
        subset = ok if recipe.monotone_rows is None else ok[:recipe.monotone_rows]
        sig = [_number(r[i]) for r in subset]
        if len(subset) < len(rows if recipe.monotone_rows is None else rows[:recipe.monotone_rows]):
            out.append(Mismatch(recipe.name, "status", -1, "all ok", "failed rows"))
        elif not all(b > a for a, b in zip(sig, sig[1:])):
            out.append(Mismatch(recipe.name, "sigma", -1, "strictly increasing", str(sig)))
    if recipe.slope is not None and len(ok) >= 2:
        x = np.log(1.0 / np.abs([_number(r[0]) for r in ok]))
        y = np.log([_number(r[i]) for r in ok])
        s = float(np.polyfit(x, y, 1)[0])
        lo, hi = recipe.slope
        if not lo <= s <= hi:
            out.append(Mismatch(recipe.name, "slope", -1, f"[{lo}, {hi}]", f"{s:.4f}"))
    return out


def compare_csv(recipe: Recipe, golden_path, new_path) -> list:
    """Mismatches between the golden CSV and a fresh one."""
    g_header, g_rows = read_csv(golden_path)
    n_header, n_rows = read_csv(new_path)
    if g_header != n_header:
        return [Mismatch(recipe.name, "header", -1, ",".join(g_header), ",".join(n_header))]
    if len(g_rows) != len(n_rows):
        return [Mismatch(recipe.name, "rows", -1, str(len(g_rows)), str(len(n_rows)))]
    out = []
    for k, (g, n) in enumerate(zip(g_rows, n_rows)):
        for col, a, b in zip(g_header, g, n):
            if _ignored(recipe, col):
                continue
            if col in recipe.rtol:
                x, y = _number(a), _number(b)
                if math.isnan(x) and math.isnan(y):
                    continue
                if not abs(y - x) <= recipe.rtol[col] * abs(x):
                    out.append(Mismatch(recipe.name, col, k, a, b))
            elif a != b:
                out.append(Mismatch(recipe.name, col, k, a, b))
    return out + _sigma_checks(recipe, n_header, n_rows)


def _verify_one(recipe: Recipe, directory: str, out_dir: str, regenerate: bool,
                extra_args: tuple) -> RecipeResult:
    result = RecipeResult(recipe)
    if not recipe.runnable:
        return result
    golden = Path(directory) / recipe.csv
    fresh = Path(out_dir) / recipe.csv
    try:
        run_recipe(recipe, fresh, extra_args)
        if regenerate:
            golden.write_bytes(fresh.read_bytes())
        if not golden.exists():
            result.error = f"missing golden file {golden}"
            return result
        result.mismatches = compare_csv(recipe, golden, fresh)
    except Exception as exc:  # reported per recipe; the other recipes still run
        result.error = f"{type(exc).__name__}: {exc}"
    return result


def verify_goldens(directory=None, regenerate: bool = False, only: Optional[Sequence[str]] = None,
                   jobs: int = 1, out_dir=None, extra_args: Sequence[str] = ()) -> GoldenSummary:
    """Re-run every recipe and compare with the stored CSVs.

    ``out_dir`` keeps the freshly generated CSVs (a temporary directory by
    default); ``regenerate`` overwrites the goldens with them first;
    ``extra_args`` are appended to every command (for example a looser
    ``--rtol``).  Recipes run in up to ``jobs`` processes.
    """
    directory = Path(directory or GOLDEN_DIR)
    recipes = load_manifest(directory)
    if only:
        unknown = set(only) - {r.name for r in recipes}
        if unknown:
            raise ValueError(f"unknown recipe(s): {', '.join(sorted(unknown))}")
        recipes = [r for r in recipes if r.name in only]
    tmp = None
    if out_dir is None:
        tmp = tempfile.TemporaryDirectory(prefix="stiffkit-goldens-")
        out_dir = tmp.name
    os.makedirs(out_dir, exist_ok=True)
    args = [(r, str(directory), str(out_dir), regenerate, tuple(extra_args)) for r in recipes]
    try:
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(_verify_one, *zip(*args)))
        else:
            results = [_verify_one(*a) for a in args]
    finally:
        if tmp is not None:
            tmp.cleanup()
    return GoldenSummary(results)

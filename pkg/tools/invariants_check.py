#!/usr/bin/env python3
"""
ddlab Invariants Gate - Prevents Benchmark Drift

Validates that the default config, library constants, requirements, CI checks and
README match the canonical invariants defined in ops/invariants.yaml.

Usage:
    python3 tools/invariants_check.py

Exit codes:
    0 - All invariants validated successfully
    1 - One or more invariants failed validation
"""
import json
import sys
from pathlib import Path
from typing import Any, Dict, List

import yaml

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from ddlab.cli import ddlabctl  # noqa: E402
from ddlab.denoiser import checkpoint  # noqa: E402
from ddlab.toy_data import DEFAULT_PARAMS, DistKind  # noqa: E402


class InvariantsChecker:
    """Validates repository files against canonical invariants."""

    def __init__(self, repo_root: Path):
        self.repo_root = repo_root
        self.invariants = self._load_invariants()
        self.failures: List[str] = []

    def _load_invariants(self) -> Dict[str, Any]:
        """Load invariants from ops/invariants.yaml."""
        invariants_path = self.repo_root / "ops" / "invariants.yaml"

        if not invariants_path.exists():
            print(f"ERROR: Invariants file not found: {invariants_path}")
            sys.exit(1)

        with open(invariants_path, "r") as f:
            return yaml.safe_load(f)

    def fail(self, message: str):
        """Record a validation failure."""
        self.failures.append(message)
        print(f"FAIL: {message}")

    def _expect(self, label: str, actual: Any, expected: Any):
        if actual != expected:
            self.fail(f"{label} is {actual!r}, expected {expected!r}")

    def check_default_config(self):
        """Validate the checked-in benchmark config."""
        print("\n=== Checking Default Config ===")
        before = len(self.failures)

        bench = self.invariants["benchmark"]
        config_path = self.repo_root / bench["config_path"]
        if not config_path.exists():
            self.fail(f"Default config not found: {config_path}")
            return

        with open(config_path, "r") as f:
            try:
                config = json.load(f)
            except json.JSONDecodeError as e:
                self.fail(f"Default config is not valid JSON: {e}")
                return

        dist = config.get("distribution", {})
        params = dist.get("params", {})
        self._expect("distribution.kind", dist.get("kind"), bench["distribution"]["kind"])
        for key in ("n_modes", "ring_radius", "mode_std"):
            self._expect(f"distribution.params.{key}", params.get(key), bench["distribution"][key])

        schedule = config.get("schedule", {})
        self._expect("schedule.kind", schedule.get("kind"), bench["schedule"]["kind"])
        self._expect("schedule.T", schedule.get("T"), bench["schedule"]["T"])

        sampler = config.get("sampler", {})
        for key, value in bench["grids"].items():
            self._expect(f"sampler.{key}", sampler.get(key), value)

        self._expect("seeds.master", config.get("seeds", {}).get("master"), bench["seeds"]["master"])
        self._expect("metrics.n_samples", config.get("metrics", {}).get("n_samples"),
                     bench["metrics"]["n_samples"])

        if len(self.failures) == before:
            print("✓ Default config valid")

    def check_library_constants(self):
        """Validate code-level defaults against the benchmark."""
        print("\n=== Checking Library Constants ===")
        before = len(self.failures)

        bench = self.invariants["benchmark"]["distribution"]
        defaults = DEFAULT_PARAMS[DistKind(bench["kind"])]
        for key in ("n_modes", "ring_radius", "mode_std"):
            self._expect(f"DEFAULT_PARAMS[{bench['kind']}][{key}]", defaults.get(key), bench[key])

        ckpt = self.invariants["checkpoint"]
        self._expect("checkpoint.MAGIC", checkpoint.MAGIC, ckpt["magic"].encode("ascii"))
        self._expect("checkpoint.FORMAT_VERSION", checkpoint.FORMAT_VERSION, ckpt["format_version"])

        codes = self.invariants["cli"]["exit_codes"]
        self._expect("EXIT_OK", ddlabctl.EXIT_OK, codes["ok"])
        self._expect("EXIT_ERROR", ddlabctl.EXIT_ERROR, codes["error"])
        self._expect("EXIT_CONFIG", ddlabctl.EXIT_CONFIG, codes["config"])
        self._expect("EXIT_ARTIFACT", ddlabctl.EXIT_ARTIFACT, codes["artifact"])

        if len(self.failures) == before:
            print("✓ Library constants valid")

    def check_requirements(self):
        """Validate requirements files contain necessary dependencies."""
        print("\n=== Checking Requirements ===")
        before = len(self.failures)

        ci_inv = self.invariants["ci"]
        for filename, key in (("requirements.txt", "required_dependencies"),
                              ("requirements-dev.txt", "required_dev_dependencies")):
            req_file = self.repo_root / filename
            if not req_file.exists():
                self.fail(f"{filename} not found: {req_file}")
                continue

            with open(req_file, "r") as f:
                requirements = f.read().lower()

            for dep in ci_inv[key]:
                if dep.lower() not in requirements:
                    self.fail(f"{filename} missing required dependency: {dep}")

        if len(self.failures) == before:
            print("✓ Requirements valid")

    def check_ci(self):
        """Validate that every required CI check has something to run."""
        print("\n=== Checking CI Checks ===")
        before = len(self.failures)

        for name, rel_path in self.invariants["ci"]["required_checks"].items():
            target = self.repo_root / rel_path
            if not target.exists():
                self.fail(f"CI check {name} has nothing to run: {rel_path} not found")
            elif target.is_dir() and not any(target.glob("test_*.py")):
                self.fail(f"CI check {name} has nothing to run: no test_*.py under {rel_path}")

        if len(self.failures) == before:
            print("✓ CI checks valid")

    def check_documentation_invariants(self):
        """Validate README structure."""
        print("\n=== Checking Documentation Invariants ===")
        before = len(self.failures)

        readme = self.repo_root / "README.md"
        if not readme.exists():
            self.fail("README.md not found")
            return

        with open(readme, "r") as f:
            content = f.read()

        for section in self.invariants["documentation"]["readme_required_sections"]:
            if section not in content:
                self.fail(f"README.md missing section: {section}")

        if len(self.failures) == before:
            print("✓ Documentation invariants valid")

    def run_all_checks(self) -> bool:
        """Run all invariant checks."""
        print("=" * 60)
        print("ddlab Invariants Gate")
        print("=" * 60)

        self.check_default_config()
        self.check_library_constants()
        self.check_requirements()
        self.check_ci()
        self.check_documentation_invariants()

        print("\n" + "=" * 60)

        if self.failures:
            print(f"\n❌ FAILED: {len(self.failures)} invariant(s) violated")
            print("\nFailures:")
            for i, failure in enumerate(self.failures, 1):
                print(f"  {i}. {failure}")
            return False
        else:
            print("\n✅ SUCCESS: All invariants validated")
            return True


def main():
    """Main entry point."""
    repo_root = Path(__file__).parent.parent

    checker = InvariantsChecker(repo_root)
    success = checker.run_all_checks()

    sys.exit(0 if success else 1)


if __name__ == "__main__":
    main()

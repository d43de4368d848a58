from dataclasses import dataclass
from typing import List


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


class SummaryBoard:
    """Pass/fail lines printed after a comparison or demo"""

    def __init__(self, title: str):
        self.title = title
        self.checks: List[Check] = []
        self.notes: List[str] = []

    def add_check(self, name: str, passed: bool, detail: str = "") -> bool:
        self.checks.append(Check(name, bool(passed), detail))
        return bool(passed)

    def add_note(self, text: str) -> None:
        self.notes.append(text)

    @property
    def all_passed(self) -> bool:
        return all(check.passed for check in self.checks)

    def get_text(self) -> str:
        lines = [f"== {self.title} =="]
        lines += [f"  {note}" for note in self.notes]
        for check in self.checks:
            status = "PASS" if check.passed else "FAIL"
            lines.append(f"  [{status}] {check.name}" + (f": {check.detail}" if check.detail else ""))
        passed = sum(check.passed for check in self.checks)
        lines.append(f"  {passed}/{len(self.checks)} checks passed")
        return "\n".join(lines)

    def to_dict(self):
        return {
            "title": self.title,
            "notes": list(self.notes),
            "checks": [{"name": c.name, "passed": c.passed, "detail": c.detail} for c in self.checks],
            "passed": self.all_passed,
        }

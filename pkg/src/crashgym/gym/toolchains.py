"""Map a kernel config or release version to a build toolchain image.

Kernel builds are sensitive to the compiler that produced the original
config; the shipped table pins (compiler, major) and kernel-release ranges
to container image tags so builds reproduce instead of drifting with the
host distribution.
"""

from __future__ import annotations

import re
from functools import lru_cache
from importlib import resources


class UnsupportedToolchain(Exception):
    pass


# e.g. CONFIG_CC_VERSION_TEXT="gcc (Debian 10.2.1-6) 10.2.1 20210110"
_CC_VERSION_RE = re.compile(r'^CONFIG_CC_VERSION_TEXT="(?P<text>[^"]+)"', re.M)
# e.g. "# Compiler: gcc (GCC) 9.0.0 20181231 (experimental)"
_CC_COMMENT_RE = re.compile(r"^# Compiler: (?P<text>.+)$", re.M)

_IDENTITY_RE = re.compile(r"\b(?P<name>gcc|clang)\b.*?(?P<major>\d+)\.\d+", re.I | re.S)


def compiler_hint(config: str) -> str:
    """The raw compiler identity line embedded in a config, or ''."""
    for pat in (_CC_VERSION_RE, _CC_COMMENT_RE):
        m = pat.search(config)
        if m:
            return m.group("text").strip()
    return ""


def parse_compiler_identity(text: str) -> tuple[str, int] | None:
    m = _IDENTITY_RE.search(text)
    if not m:
        return None
    return m.group("name").lower(), int(m.group("major"))


def _parse_release(release: str) -> tuple[int, int]:
    m = re.match(r"v?(\d+)\.(\d+)", release)
    if not m:
        raise UnsupportedToolchain(f"unparseable kernel release {release!r}")
    return int(m.group(1)), int(m.group(2))


@lru_cache(maxsize=1)
def _tables() -> tuple[dict[tuple[str, int], str], list[tuple[tuple[int, int], tuple[int, int], str]]]:
    compilers: dict[tuple[str, int], str] = {}
    releases: list[tuple[tuple[int, int], tuple[int, int], str]] = []
    text = resources.files("crashgym").joinpath("assets/toolchains.txt").read_text()
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "compiler":
            _, name, major, tag = parts
            compilers[(name, int(major))] = tag
        elif parts[0] == "release":
            _, lo, hi, tag = parts
            releases.append((_parse_release(lo), _parse_release(hi), tag))
    return compilers, releases


def select_toolchain(config: str, kernel_release: str = "") -> str:
    """Pick the toolchain image for a build.

    A compiler identity embedded in the config takes priority; otherwise the
    kernel release is matched against the shipped version ranges.
    """
    compilers, releases = _tables()
    hint = compiler_hint(config)
    if hint:
        ident = parse_compiler_identity(hint)
        if ident and ident in compilers:
            return compilers[ident]
    if kernel_release:
        key = _parse_release(kernel_release)
        for lo, hi, tag in releases:
            if lo <= key <= hi:
                return tag
    raise UnsupportedToolchain(
        f"no toolchain for compiler {hint!r} / release {kernel_release!r}"
    )

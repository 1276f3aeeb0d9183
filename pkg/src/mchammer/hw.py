"""Optional real-hardware probes: flush-latency hammering and flush+reload.

Runs hand-assembled x86-64 gadgets against a shared read-only file mapping.
The hammering gadget times a lone clflush per sample: fence, read the cycle
counter, feed the counter's (near-always-zero) high bit into the flush
address as an artificial ordering dependency, flush, read the counter again,
fence.  Raw counter pairs are stored, never differences.

A strawman victim fixture is bundled: two byte-identical loop functions
whose entry points sit 512 bytes apart, each spanning four 64-byte lines,
serially incrementing and decrementing a counter.  Run the victim in one
process (pinned to a core, e.g. under taskset) and the probe in another,
pointed at the same image file.

Everything here is for manual validation on capable Intel hardware and is
excluded from automated acceptance; on unsupported machines the self-test
reports "inconclusive" instead of failing.
"""

from __future__ import annotations

import ctypes
import mmap
import os
import platform
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .model import (
    PROBE_FLUSH_RELOAD,
    PROBE_MC_HAMMER,
    ProbeConfig,
    Sample,
    Trace,
)

CACHE_LINE = 64
REGION_SIZE = 256
REGION_SPACING = 512
VICTIM_IMAGE_SIZE = REGION_SPACING + REGION_SIZE

# Suggested probe offsets: 128 bytes past each region entry point.
REGION_OFFSETS = {"victim_0": 0, "victim_1": REGION_SPACING}
DEFAULT_PROBE_OFFSET = 128


def supported() -> bool:
    """True on Linux/x86-64, where the gadget instruction set applies."""
    return platform.machine() in ("x86_64", "amd64") and sys.platform.startswith("linux")


@dataclass(frozen=True)
class HwTarget:
    """A mappable read-only file and the byte offset of the probed line."""

    path: Path
    offset: int

    def __post_init__(self):
        if self.offset < 0:
            raise ValueError("offset must be non-negative")

    @property
    def line_offset(self) -> int:
        """Probed offset rounded down to its 64-byte cache line."""
        return self.offset & ~(CACHE_LINE - 1)


class _Asm:
    """Byte assembler with one-pass labels and rel8/rel32 back-patching."""

    def __init__(self):
        self.code = bytearray()
        self.labels: dict[str, int] = {}
        self.fixups: list[tuple[int, str, int]] = []  # (pos, label, width)

    def emit(self, *raw: int) -> None:
        self.code.extend(raw)

    def label(self, name: str) -> None:
        self.labels[name] = len(self.code)

    def jump(self, opcode: bytes, label: str, width: int) -> None:
        self.code.extend(opcode)
        self.fixups.append((len(self.code), label, width))
        self.code.extend(b"\x00" * width)

    def finish(self) -> bytes:
        for pos, label, width in self.fixups:
            rel = self.labels[label] - (pos + width)
            self.code[pos : pos + width] = rel.to_bytes(width, "little", signed=True)
        return bytes(self.code)


def _mfence(a: _Asm) -> None:
    a.emit(0x0F, 0xAE, 0xF0)


def _lfence(a: _Asm) -> None:
    a.emit(0x0F, 0xAE, 0xE8)


def _rdtsc(a: _Asm) -> None:
    a.emit(0x0F, 0x31)


def _combine_tsc_into_rdx(a: _Asm) -> None:
    a.emit(0x48, 0xC1, 0xE2, 0x20)  # shl rdx, 32
    a.emit(0x48, 0x09, 0xC2)        # or rdx, rax


def _store_pair_and_advance(a: _Asm) -> None:
    a.emit(0x48, 0x89, 0x1E)        # mov [rsi], rbx      (start, low 32 bits)
    a.emit(0x48, 0x89, 0x56, 0x08)  # mov [rsi+8], rdx    (end, full 64 bits)
    a.emit(0x48, 0x83, 0xC6, 0x10)  # add rsi, 16


def mc_capture_code() -> bytes:
    """void f(char *flush_addr, uint64_t *out, uint64_t n) -- hammer loop.

    Per sample: mfence; rdtsc; save the low 32 start bits; shift the high
    bit of the 64-bit counter into rdx and flush [addr+rdx] so the flush
    cannot reorder before the first rdtsc; rdtsc; mfence; store both
    counters.
    """
    a = _Asm()
    a.emit(0x53)              # push rbx
    a.emit(0x49, 0x89, 0xD2)  # mov r10, rdx          (sample count)
    a.emit(0x4D, 0x31, 0xDB)  # xor r11, r11          (loop index)
    a.emit(0x48, 0x85, 0xD2)  # test rdx, rdx
    a.jump(b"\x0f\x84", "end", 4)  # jz end
    a.label("loop")
    _mfence(a)
    _rdtsc(a)
    a.emit(0x89, 0xC3)              # mov ebx, eax     (start, low 32 bits)
    a.emit(0xC1, 0xEA, 0x1F)        # shr edx, 31      (high bit of the counter)
    a.emit(0x0F, 0xAE, 0x3C, 0x17)  # clflush [rdi+rdx]
    _rdtsc(a)
    _mfence(a)
    _combine_tsc_into_rdx(a)
    _store_pair_and_advance(a)
    a.emit(0x49, 0xFF, 0xC3)        # inc r11
    a.emit(0x4D, 0x39, 0xD3)        # cmp r11, r10
    a.jump(b"\x0f\x82", "loop", 4)  # jb loop
    a.label("end")
    a.emit(0x5B)  # pop rbx
    a.emit(0xC3)  # ret
    return a.finish()


def fr_capture_code() -> bytes:
    """void f(char *addr, uint64_t *out, uint64_t n, uint64_t wait_cycles).

    Per sample: flush the line, busy-wait the requested number of cycles on
    the counter, then perform a fenced, timed reload and store both counters.
    """
    a = _Asm()
    a.emit(0x53)              # push rbx
    a.emit(0x49, 0x89, 0xD2)  # mov r10, rdx
    a.emit(0x4D, 0x31, 0xDB)  # xor r11, r11
    a.emit(0x48, 0x85, 0xD2)  # test rdx, rdx
    a.jump(b"\x0f\x84", "end", 4)
    a.label("loop")
    _mfence(a)
    a.emit(0x0F, 0xAE, 0x3F)  # clflush [rdi]
    _mfence(a)
    _rdtsc(a)
    _combine_tsc_into_rdx(a)
    a.emit(0x4C, 0x8D, 0x04, 0x0A)  # lea r8, [rdx+rcx]  (deadline)
    a.label("spin")
    _rdtsc(a)
    _combine_tsc_into_rdx(a)
    a.emit(0x4C, 0x39, 0xC2)        # cmp rdx, r8
    a.jump(b"\x72", "spin", 1)      # jb spin
    _mfence(a)
    _rdtsc(a)
    a.emit(0x89, 0xC3)              # mov ebx, eax     (reload start, low 32)
    _lfence(a)
    a.emit(0x44, 0x8A, 0x0F)        # mov r9b, [rdi]   (the timed reload)
    _lfence(a)
    _rdtsc(a)
    _mfence(a)
    _combine_tsc_into_rdx(a)
    _store_pair_and_advance(a)
    a.emit(0x49, 0xFF, 0xC3)        # inc r11
    a.emit(0x4D, 0x39, 0xD3)        # cmp r11, r10
    a.jump(b"\x0f\x82", "loop", 4)
    a.label("end")
    a.emit(0x5B)
    a.emit(0xC3)
    return a.finish()


def victim_region_code() -> bytes:
    """One 256-byte loop function: void f(uint64_t iterations).

    41 serial inc/dec pairs on rax fill the body, followed by the loop
    counter decrement, the backward branch, and ret; exactly four cache
    lines.
    """
    body = bytearray()
    for _ in range(41):
        body += bytes((0x48, 0xFF, 0xC0))  # inc rax
        body += bytes((0x48, 0xFF, 0xC8))  # dec rax
    body += bytes((0x48, 0xFF, 0xCF))  # dec rdi
    rel = -(len(body) + 6)
    body += b"\x0f\x85" + rel.to_bytes(4, "little", signed=True)  # jnz top
    body += b"\xc3"  # ret
    assert len(body) == REGION_SIZE
    return bytes(body)


def victim_image() -> bytes:
    """Both victim regions at their fixed offsets, int3-padded between."""
    region = victim_region_code()
    image = bytearray(b"\xcc" * VICTIM_IMAGE_SIZE)
    image[0:REGION_SIZE] = region
    image[REGION_SPACING : REGION_SPACING + REGION_SIZE] = region
    return bytes(image)


def write_victim_image(path: Path) -> Path:
    path = Path(path)
    path.write_bytes(victim_image())
    return path


class _ExecBuffer:
    """Anonymous RWX mapping holding generated code."""

    def __init__(self, code: bytes):
        self._map = mmap.mmap(
            -1, len(code), prot=mmap.PROT_READ | mmap.PROT_WRITE | mmap.PROT_EXEC
        )
        self._map.write(code)
        self._view = np.frombuffer(self._map, dtype=np.uint8)
        self.address = int(self._view.ctypes.data)

    def close(self) -> None:
        del self._view  # drop the buffer export so the mapping can close
        self._map.close()


class _FileMapping:
    """Shared read-only mapping of the probed file."""

    def __init__(self, path: Path):
        fh = open(path, "rb")
        try:
            self._map = mmap.mmap(fh.fileno(), 0, mmap.MAP_SHARED, mmap.PROT_READ)
        finally:
            fh.close()
        self._view = np.frombuffer(self._map, dtype=np.uint8)
        self.address = int(self._view.ctypes.data)
        self.size = len(self._map)

    def close(self) -> None:
        del self._view
        self._map.close()


def _require_supported() -> None:
    if not supported():
        raise RuntimeError(
            f"hardware probes require Linux/x86-64, running on "
            f"{sys.platform}/{platform.machine()}"
        )


def _map_target(target: HwTarget) -> _FileMapping:
    size = os.path.getsize(target.path)
    if target.line_offset >= size:
        raise ValueError(f"offset {target.offset:#x} beyond end of {target.path}")
    return _FileMapping(Path(target.path))


def _reconstruct_starts(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rebuild full 64-bit start counters from (start_low32, end64) pairs."""
    start_low = raw[0::2]
    ends = raw[1::2]
    starts = (ends & ~np.uint64(0xFFFFFFFF)) | start_low
    borrow = starts > ends
    starts[borrow] -= np.uint64(1) << np.uint64(32)
    return starts, ends


def _capture_meta(kind: str, target: HwTarget, extra: dict[str, str]) -> dict[str, str]:
    meta = {
        "probe": kind,
        "target": f"{target.path}+{target.offset:#x}",
        "host": platform.node() or "unknown",
    }
    meta.update(extra)
    return meta


def mc_hammer_capture(target: HwTarget, num_samples: int) -> Trace:
    """Time back-to-back flushes of the target line; store raw counter pairs."""
    if num_samples < 0:
        raise ValueError("num_samples must be >= 0")
    meta = _capture_meta(PROBE_MC_HAMMER, target, {})
    if num_samples == 0:
        return Trace(samples=[], meta=meta)
    _require_supported()
    mapping = _map_target(target)
    gadget = _ExecBuffer(mc_capture_code())
    try:
        out = np.zeros(2 * num_samples, dtype=np.uint64)
        func = ctypes.CFUNCTYPE(
            None, ctypes.c_uint64, ctypes.c_void_p, ctypes.c_uint64
        )(gadget.address)
        func(mapping.address + target.line_offset, out.ctypes.data, num_samples)
    finally:
        gadget.close()
        mapping.close()
    starts, ends = _reconstruct_starts(out)
    samples = [Sample(i, int(s), int(e)) for i, (s, e) in enumerate(zip(starts, ends))]
    return Trace(samples=samples, meta=meta)


def flush_reload_capture(target: HwTarget, config: ProbeConfig) -> Trace:
    """Flush, busy-wait the configured window, then time the reload."""
    if config.kind != PROBE_FLUSH_RELOAD:
        raise ValueError("config.kind must be flush_reload")
    meta = _capture_meta(
        PROBE_FLUSH_RELOAD, target, {"wait_cycles": str(config.wait_cycles)}
    )
    if config.num_samples == 0:
        return Trace(samples=[], meta=meta)
    _require_supported()
    mapping = _map_target(target)
    gadget = _ExecBuffer(fr_capture_code())
    try:
        out = np.zeros(2 * config.num_samples, dtype=np.uint64)
        func = ctypes.CFUNCTYPE(
            None, ctypes.c_uint64, ctypes.c_void_p, ctypes.c_uint64, ctypes.c_uint64
        )(gadget.address)
        func(
            mapping.address + target.line_offset,
            out.ctypes.data,
            config.num_samples,
            config.wait_cycles,
        )
    finally:
        gadget.close()
        mapping.close()
    starts, ends = _reconstruct_starts(out)
    samples = [Sample(i, int(s), int(e)) for i, (s, e) in enumerate(zip(starts, ends))]
    return Trace(samples=samples, meta=meta)


def run_victim(region: str, iterations: int, image_path: Path) -> None:
    """Execute the strawman loop in this process (this IS the victim)."""
    if region not in REGION_OFFSETS:
        raise ValueError(f"region must be one of {tuple(REGION_OFFSETS)}")
    if iterations <= 0:
        raise ValueError("iterations must be > 0")
    _require_supported()
    image_path = Path(image_path)
    if not image_path.exists():
        write_victim_image(image_path)
    fh = open(image_path, "rb")
    try:
        mapping = mmap.mmap(
            fh.fileno(), 0, mmap.MAP_PRIVATE, mmap.PROT_READ | mmap.PROT_EXEC
        )
    finally:
        fh.close()
    view = np.frombuffer(mapping, dtype=np.uint8)
    try:
        entry = int(view.ctypes.data) + REGION_OFFSETS[region]
        func = ctypes.CFUNCTYPE(None, ctypes.c_uint64)(entry)
        func(iterations)
    finally:
        del view
        mapping.close()


def spawn_victim(region: str, iterations: int, image_path: Path) -> subprocess.Popen:
    """Run the victim fixture in a separate process via the CLI."""
    return subprocess.Popen(
        [
            sys.executable,
            "-m",
            "mchammer.cli",
            "victim",
            "--region",
            region,
            "--iterations",
            str(iterations),
            "--image",
            str(image_path),
        ],
        stdout=subprocess.DEVNULL,
        stderr=subprocess.DEVNULL,
    )


@dataclass
class SelfTestReport:
    """Median separations observed by the two probes against a live victim."""

    verdict: str  # "pass", "inconclusive" or "unsupported"
    mc_active_median: Optional[float] = None
    mc_idle_median: Optional[float] = None
    fr_hit_median: Optional[float] = None
    fr_miss_median: Optional[float] = None

    def render(self) -> str:
        lines = [f"self-test verdict: {self.verdict}"]
        if self.mc_active_median is not None:
            lines.append(
                f"hammer medians: active={self.mc_active_median} idle={self.mc_idle_median} "
                f"separation={self.mc_active_median - self.mc_idle_median}"
            )
        if self.fr_hit_median is not None:
            lines.append(
                f"flush+reload medians: hit={self.fr_hit_median} miss={self.fr_miss_median} "
                f"separation={self.fr_miss_median - self.fr_hit_median}"
            )
        return "\n".join(lines)


def self_test(num_samples: int = 1 << 17, wait_cycles: int = 1000) -> SelfTestReport:
    """Two-process separation check; see README for the manual procedure.

    Captures against the bundled victim image with the victim absent and
    then executing the probed region.  Median separations above 100 cycles
    for both probes pass; anything else is inconclusive (frequency scaling,
    scheduling and non-Intel SMC behavior all blur the signal).
    """
    if not supported():
        return SelfTestReport(verdict="unsupported")
    with tempfile.TemporaryDirectory(prefix="mchammer-hw-") as tmp:
        image = Path(tmp) / "victim-image.bin"
        write_victim_image(image)
        target = HwTarget(path=image, offset=DEFAULT_PROBE_OFFSET)

        idle_mc = mc_hammer_capture(target, num_samples)
        fr_config = ProbeConfig(
            kind=PROBE_FLUSH_RELOAD, num_samples=num_samples // 8, wait_cycles=wait_cycles
        )
        idle_fr = flush_reload_capture(target, fr_config)

        victim = spawn_victim("victim_0", 1 << 34, image)
        try:
            time.sleep(2.0)  # interpreter startup: let the victim reach its loop
            live_mc = mc_hammer_capture(target, num_samples)
            live_fr = flush_reload_capture(target, fr_config)
        finally:
            victim.terminate()
            victim.wait()

    mc_active = float(np.median(live_mc.latencies()))
    mc_idle = float(np.median(idle_mc.latencies()))
    fr_hit = float(np.median(live_fr.latencies()))
    fr_miss = float(np.median(idle_fr.latencies()))
    ok = (mc_active - mc_idle > 100) and (fr_miss - fr_hit > 100)
    return SelfTestReport(
        verdict="pass" if ok else "inconclusive",
        mc_active_median=mc_active,
        mc_idle_median=mc_idle,
        fr_hit_median=fr_hit,
        fr_miss_median=fr_miss,
    )

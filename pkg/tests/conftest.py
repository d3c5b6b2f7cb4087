import numpy as np
import pytest

from psa.metadata import KVBlock
from psa.store import TieredBlockStore


def rel_err(approx, exact):
    exact = np.asarray(exact, dtype=np.float64)
    return float(np.linalg.norm(np.asarray(approx, dtype=np.float64) - exact) / np.linalg.norm(exact))


def make_blocks(rng, n_blocks, block_size, d, dtype=np.float32, layer=0, start_id=0,
                request_id=None, last_tokens=None):
    """Random blocks plus the concatenated keys/values they were cut from."""
    sizes = [block_size] * n_blocks
    if last_tokens is not None:
        sizes[-1] = last_tokens
    n = sum(sizes)
    keys = rng.standard_normal((n, d)).astype(dtype)
    values = rng.standard_normal((n, d)).astype(dtype)
    blocks, pos = [], 0
    for i, size in enumerate(sizes):
        blocks.append(KVBlock(start_id + i, layer, keys[pos:pos + size], values[pos:pos + size],
                              request_id=request_id))
        pos += size
    return blocks, keys, values


def fill_store(blocks, capacity=None, **kwargs):
    kwargs.setdefault("write_allocate", False)
    store = TieredBlockStore(len(blocks) if capacity is None else capacity, **kwargs)
    for b in blocks:
        store.put_block(b)
    return store


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance_log(request):
    """Record one pass/fail line per exit criterion; echoed in the run summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def record(number, title, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail})"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)

"""Order-preserving map over independent trials."""

from concurrent.futures import ProcessPoolExecutor


def pmap(fn, items, jobs=1):
    """``list(map(fn, items))``, optionally spread over ``jobs`` processes.

    Results come back in input order, so any reduction over them is the same
    for every value of ``jobs``. ``fn`` must be picklable when ``jobs > 1``.
    """
    items = list(items)
    if jobs is None or jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    chunksize = max(1, len(items) // (4 * jobs))
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items, chunksize=chunksize))

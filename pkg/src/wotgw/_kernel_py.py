"""Pure-Python key-rewrite kernel.

Fallback used when the compiled extension (wotgw._kernel_cy) is not
available. Both kernels must behave identically; tests compare them.
"""


def rewrite_keys(value, table, forbidden):
    """Return a copy of ``value`` with every object key mapped through ``table``.

    Keys absent from ``table`` are kept as-is. A key present in ``forbidden``
    raises ValueError carrying the offending key (the caller renders the
    path). Lists and objects are rebuilt, leaf values are shared.
    """
    if isinstance(value, dict):
        out = {}
        for key, sub in value.items():
            if key in forbidden:
                raise ValueError(key)
            out[table.get(key, key)] = rewrite_keys(sub, table, forbidden)
        return out
    if isinstance(value, list):
        return [rewrite_keys(item, table, forbidden) for item in value]
    return value

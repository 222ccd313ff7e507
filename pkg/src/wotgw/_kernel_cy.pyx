# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled key-rewrite kernel. Mirrors wotgw._kernel_py exactly."""


def rewrite_keys(object value, dict table, frozenset forbidden):
    """Map object keys through ``table``; raise ValueError on a forbidden key."""
    cdef dict out
    cdef list items
    if isinstance(value, dict):
        out = {}
        for key, sub in (<dict>value).items():
            if key in forbidden:
                raise ValueError(key)
            out[table.get(key, key)] = rewrite_keys(sub, table, forbidden)
        return out
    if isinstance(value, list):
        items = []
        for item in <list>value:
            items.append(rewrite_keys(item, table, forbidden))
        return items
    return value

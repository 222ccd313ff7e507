"""wotgw: a Web-of-Things gateway fronting embedded device web APIs.

Rate-limits and screens clients, caches device responses, shortens JSON
payloads via dictionary key coding, reports device outages, and bridges
IPv4/IPv6 clients and devices through a SOCKS5-based relay of two
terminated connections.
"""

__version__ = "0.1.0"

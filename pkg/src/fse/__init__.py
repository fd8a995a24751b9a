"""Dynamic searchable symmetric encryption with tiered, locality-aware indexes."""

from .builder import PlainIndex, build_plain_index, index_gen, plan_update, setup, tokenize
from .crypto import IndexKeys, SearchToken, derive_index_keys, make_token
from .layout import IndexParams, Manifest, order_of
from .server import IndexStore
from .session import LocalTransport, Session

__version__ = "0.1.0"

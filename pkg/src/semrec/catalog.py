"""Item catalog and interaction ingestion.

File formats (UTF-8, tab-separated):
  catalog:      item_id<TAB>field=value<TAB>field=value...   ("=" in names or
                values escaped as "\\=")
  interactions: user_id<TAB>item_id<TAB>timestamp            (integer timestamp)
  enhanced:     item_id<TAB>text

Datasets are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

ENHANCED_KINDS = ("keyword", "summary", "expansion")


@dataclass
class CatalogItem:
    item_id: int
    attributes: list  # ordered (field_name, field_value) pairs

    def get(self, name):
        for k, v in self.attributes:
            if k == name:
                return v
        return None


class ItemCatalog:
    """Ordered item table. Row order equals file read order and defines the
    catalog order every embedding table aligns to. Id 0 is reserved for
    padding and never appears in a catalog."""

    def __init__(self, items: list[CatalogItem], source_digest=None):
        self.items = items
        self.by_id = {it.item_id: it for it in items}
        self.source_digest = source_digest
        self.rendered_text: dict[int, str] = {}
        self.text_source = "sac"

    def __len__(self):
        return len(self.items)

    def __contains__(self, item_id):
        return item_id in self.by_id

    def ids(self):
        return [it.item_id for it in self.items]

    def row_of(self, item_id: int) -> int:
        """Catalog-order row index of an item id (0-based)."""
        try:
            return self._row_index[item_id]
        except AttributeError:
            self._row_index = {it.item_id: i for i, it in enumerate(self.items)}
            return self._row_index[item_id]

    def set_texts(self, texts: dict[int, str], source: str):
        self.rendered_text = dict(texts)
        self.text_source = source


def _split_attribute(token: str, path, lineno: int):
    i = 0
    while True:
        j = token.find("=", i)
        if j == -1:
            raise ValueError(f"{path}:{lineno}: malformed attribute {token!r} (no '=')")
        if j > 0 and token[j - 1] == "\\":
            i = j + 1
            continue
        name = token[:j].replace("\\=", "=")
        value = token[j + 1:].replace("\\=", "=")
        if not name:
            raise ValueError(f"{path}:{lineno}: attribute with empty field name")
        return name, value


def escape_attr(text: str) -> str:
    """Escape a field name or value for the catalog file format."""
    return text.replace("=", "\\=")


def load_catalog(path) -> ItemCatalog:
    """Read a catalog file.

    Raises:
        ValueError: malformed line, reserved or duplicate id, or an item
            with no attributes (all named with line numbers).
    """
    from .hashing import digest_file

    items = []
    seen: dict[int, int] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            try:
                item_id = int(fields[0])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed item id {fields[0]!r}") from None
            if item_id == 0:
                raise ValueError(f"{path}:{lineno}: item id 0 is the reserved padding id")
            if item_id < 0:
                raise ValueError(f"{path}:{lineno}: item id must be positive, got {item_id}")
            if item_id in seen:
                raise ValueError(f"{path}:{lineno}: duplicate item id {item_id} "
                                 f"(first on line {seen[item_id]})")
            seen[item_id] = lineno
            attrs = [_split_attribute(tok, path, lineno) for tok in fields[1:]]
            if not any(v for _, v in attrs):
                raise ValueError(f"{path}:{lineno}: item {item_id} has no non-empty attributes")
            items.append(CatalogItem(item_id=item_id, attributes=attrs))
    return ItemCatalog(items, source_digest=digest_file(path))


def render_sac(item: CatalogItem, field_order=None) -> str:
    """Render an item as "<Field>: <value>. <Field>: <value>." in the given
    field order (item's own attribute order when None). Missing or empty
    fields are skipped.

    Note: the rendering is injective on field values for a fixed order as
    long as no value contains ". "; values containing that substring can
    collide with a rendering of differently split fields.
    """
    if field_order is None:
        pairs = [(k, v) for k, v in item.attributes if v]
    else:
        pairs = []
        for name in field_order:
            v = item.get(name)
            if v:
                pairs.append((name, v))
    if not pairs:
        raise ValueError(f"item {item.item_id} has no renderable attributes")
    return " ".join(f"{k}: {v}." for k, v in pairs)


def render_catalog(catalog: ItemCatalog, field_order=None) -> dict[int, str]:
    """Render every item with render_sac and install the texts on the catalog."""
    texts = {it.item_id: render_sac(it, field_order) for it in catalog.items}
    catalog.set_texts(texts, "sac")
    return texts


def load_enhanced_texts(path, kind: str, catalog: ItemCatalog) -> dict[int, str]:
    """Read an externally produced per-item text file (keyword / summary /
    expansion). The file must cover the catalog exactly: every item id once,
    no unknown ids, no empty texts."""
    if kind not in ENHANCED_KINDS:
        raise ValueError(f"unknown enhanced-text kind {kind!r}; expected one of {ENHANCED_KINDS}")
    texts: dict[int, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t", 1)
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected item_id<TAB>text")
            try:
                item_id = int(parts[0])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed item id {parts[0]!r}") from None
            if item_id not in catalog:
                raise ValueError(f"{path}:{lineno}: unknown item {item_id}")
            if item_id in texts:
                raise ValueError(f"{path}:{lineno}: duplicate text for item {item_id}")
            if not parts[1]:
                raise ValueError(f"{path}:{lineno}: empty text for item {item_id}")
            texts[item_id] = parts[1]
    missing = sorted(set(catalog.by_id) - set(texts))
    if missing:
        raise ValueError(f"{path}: texts missing for items {missing}")
    return texts


@dataclass
class UserSequence:
    """One user's chronologically ordered item ids with the leave-one-out
    split: last item is the test target, second-to-last the validation
    target, the remainder the training prefix. The test context includes
    the validation item (standard protocol)."""

    user_id: int
    items: list

    @property
    def train_items(self):
        return self.items[:-2]

    @property
    def valid_target(self):
        return self.items[-2]

    @property
    def valid_context(self):
        return self.items[:-2]

    @property
    def test_target(self):
        return self.items[-1]

    @property
    def test_context(self):
        return self.items[:-1]

    def history(self) -> set:
        return set(self.items)


@dataclass
class InteractionDataset:
    users: list  # UserSequence, sorted by user_id
    n_items: int
    min_length: int
    duplicates_dropped: int = 0
    source_digest: str | None = None

    def __len__(self):
        return len(self.users)


def load_interactions(path, catalog: ItemCatalog, min_length: int = 5) -> InteractionDataset:
    """Read (user, item, timestamp) triples into per-user sequences.

    Sequences are sorted by timestamp with ties broken by file order; exact
    duplicate triples are dropped with a warning; users shorter than
    `min_length` are dropped. Item ids must exist in the catalog.
    """
    from .hashing import digest_file

    if min_length < 3:
        raise ValueError(f"min_length must be >= 3 so all split positions exist, got {min_length}")
    per_user: dict[int, list] = {}
    seen_triples = set()
    duplicates = 0
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected user_id<TAB>item_id<TAB>timestamp")
            try:
                user_id, item_id, ts = int(parts[0]), int(parts[1]), int(parts[2])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-integer field in {line!r}") from None
            if item_id not in catalog:
                raise ValueError(f"{path}:{lineno}: item {item_id} not in catalog")
            triple = (user_id, item_id, ts)
            if triple in seen_triples:
                duplicates += 1
                continue
            seen_triples.add(triple)
            per_user.setdefault(user_id, []).append((ts, item_id))
    if duplicates:
        warnings.warn(f"{path}: dropped {duplicates} duplicate interaction triples")
    users = []
    for uid in sorted(per_user):
        rows = per_user[uid]
        rows.sort(key=lambda r: r[0])  # stable: ties keep file order
        if len(rows) < min_length:
            continue
        users.append(UserSequence(user_id=uid, items=[item for _, item in rows]))
    return InteractionDataset(users=users, n_items=len(catalog), min_length=min_length,
                              duplicates_dropped=duplicates,
                              source_digest=digest_file(path))


# ---------------------------------------------------------------------------
# canonical serialization (used by the stage cache)


def to_model_space(catalog: ItemCatalog, dataset: InteractionDataset) -> InteractionDataset:
    """Remap raw item ids to dense model ids (catalog row + 1, 0 = padding).

    Embedding tables are indexed by catalog row, so models need ids
    1..N in catalog order. When catalog ids already are that range this
    returns the dataset unchanged.
    """
    if catalog.ids() == list(range(1, len(catalog) + 1)):
        return dataset
    users = [UserSequence(user_id=u.user_id,
                          items=[catalog.row_of(i) + 1 for i in u.items])
             for u in dataset.users]
    return InteractionDataset(users=users, n_items=len(catalog),
                              min_length=dataset.min_length,
                              duplicates_dropped=dataset.duplicates_dropped,
                              source_digest=dataset.source_digest)


def bundle_to_json(catalog: ItemCatalog, dataset: InteractionDataset) -> str:
    doc = {
        "items": [{"id": it.item_id, "attrs": it.attributes} for it in catalog.items],
        "texts": {str(k): v for k, v in catalog.rendered_text.items()},
        "text_source": catalog.text_source,
        "catalog_digest": catalog.source_digest,
        "users": [{"id": u.user_id, "items": u.items} for u in dataset.users],
        "min_length": dataset.min_length,
        "duplicates_dropped": dataset.duplicates_dropped,
        "interactions_digest": dataset.source_digest,
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def bundle_from_json(text: str):
    doc = json.loads(text)
    items = [CatalogItem(item_id=d["id"], attributes=[tuple(p) for p in d["attrs"]])
             for d in doc["items"]]
    catalog = ItemCatalog(items, source_digest=doc["catalog_digest"])
    catalog.set_texts({int(k): v for k, v in doc["texts"].items()}, doc["text_source"])
    users = [UserSequence(user_id=d["id"], items=list(d["items"])) for d in doc["users"]]
    dataset = InteractionDataset(users=users, n_items=len(catalog),
                                 min_length=doc["min_length"],
                                 duplicates_dropped=doc["duplicates_dropped"],
                                 source_digest=doc["interactions_digest"])
    return catalog, dataset

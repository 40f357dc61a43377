"""Repository registry: ingest listings, filter eligibility, assign categories.

A registry document is a JSON list of repository entries. Ingest tolerates
partial garbage (entries missing a remote or license are dropped and
counted); filtering applies visibility, an SPDX license allow-list, and an
activity policy; categorization is first-match over an ordered rule list
whose last rule must be a catch-all.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from datetime import datetime, timedelta
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .errors import SorryForgeError
from .model import RepoCategory, SchemaError, format_timestamp, parse_timestamp

__all__ = [
    "MalformedDocumentError",
    "RepoListing",
    "SinceDate",
    "WithinWindow",
    "ActivityPolicy",
    "DEFAULT_ACTIVITY_POLICY",
    "IngestResult",
    "ingest_registry",
    "filter_eligible",
    "assign_category",
    "load_license_allowlist",
    "load_category_rules",
    "listing_to_json",
    "listing_from_json",
]


class MalformedDocumentError(SorryForgeError):
    """The registry document is not a JSON list."""


@dataclass(frozen=True, slots=True)
class RepoListing:
    name: str
    remote: str
    license_id: str
    last_update: datetime
    is_public: bool
    category: RepoCategory | None = None


@dataclass(frozen=True, slots=True)
class SinceDate:
    """Active when last updated at or after a fixed cutoff."""

    cutoff: datetime


@dataclass(frozen=True, slots=True)
class WithinWindow:
    """Active when last updated within the trailing window."""

    days: int

    def __post_init__(self) -> None:
        if self.days < 1:
            raise ValueError("window must be at least one day")


ActivityPolicy = SinceDate | WithinWindow

DEFAULT_ACTIVITY_POLICY = WithinWindow(days=90)


@dataclass(frozen=True)
class IngestResult:
    listings: tuple[RepoListing, ...]
    dropped: int


def ingest_registry(document: str | bytes | list[Any]) -> IngestResult:
    """Parse a registry document, dropping and counting unusable entries."""
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise MalformedDocumentError(f"registry document is not JSON: {exc}") from exc
    if not isinstance(document, list):
        raise MalformedDocumentError("registry document must be a JSON list")

    listings: list[RepoListing] = []
    dropped = 0
    for entry in document:
        if not isinstance(entry, Mapping):
            dropped += 1
            continue
        remote = entry.get("remote")
        license_id = entry.get("license")
        raw_update = entry.get("last_update")
        if not remote or not license_id or not raw_update:
            dropped += 1
            continue
        try:
            last_update = parse_timestamp(str(raw_update))
        except SchemaError:
            dropped += 1
            continue
        category = entry.get("category")
        listings.append(
            RepoListing(
                name=str(entry.get("name") or ""),
                remote=str(remote),
                license_id=str(license_id),
                last_update=last_update,
                is_public=str(entry.get("visibility", "public")) != "private",
                category=RepoCategory(category) if category else None,
            )
        )
    return IngestResult(listings=tuple(listings), dropped=dropped)


def _active(last_update: datetime, policy: ActivityPolicy, now: datetime) -> bool:
    if isinstance(policy, SinceDate):
        return last_update >= policy.cutoff
    return last_update >= now - timedelta(days=policy.days)


def filter_eligible(
    listings: Iterable[RepoListing],
    policy: ActivityPolicy,
    now: datetime,
    licenses: frozenset[str] | None = None,
) -> list[RepoListing]:
    """Keep public, permissibly licensed, recently active listings in order."""
    allowed = licenses if licenses is not None else load_license_allowlist()
    return [
        listing
        for listing in listings
        if listing.is_public
        and listing.license_id in allowed
        and _active(listing.last_update, policy, now)
    ]


CategoryRule = tuple[str, RepoCategory]


def assign_category(listing: RepoListing, rules: Sequence[CategoryRule]) -> RepoCategory:
    """First case-insensitive substring match on name or remote wins.

    The caller supplies rules ending in a catch-all; if nothing matched
    anyway, the last rule's category is used so assignment stays total.
    """
    if not rules:
        raise ValueError("category rules must be non-empty")
    haystack = f"{listing.name}\n{listing.remote}".lower()
    for pattern, category in rules:
        if pattern.lower() in haystack:
            return category
    return rules[-1][1]


def _data_text(name: str) -> str:
    return resources.files("sorryforge.data").joinpath(name).read_text(encoding="utf-8")


def load_license_allowlist(path: str | Path | None = None) -> frozenset[str]:
    text = Path(path).read_text(encoding="utf-8") if path else _data_text("licenses.json")
    entries = json.loads(text)
    if not isinstance(entries, list):
        raise MalformedDocumentError("license allow-list must be a JSON list")
    return frozenset(str(entry) for entry in entries)


def load_category_rules(path: str | Path | None = None) -> list[CategoryRule]:
    text = Path(path).read_text(encoding="utf-8") if path else _data_text("category_rules.json")
    entries = json.loads(text)
    if not isinstance(entries, list) or not entries:
        raise MalformedDocumentError("category rules must be a non-empty JSON list")
    rules: list[CategoryRule] = []
    for entry in entries:
        rules.append((str(entry["pattern"]), RepoCategory(entry["category"])))
    return rules


def listing_to_json(listing: RepoListing) -> dict[str, Any]:
    obj: dict[str, Any] = {
        "name": listing.name,
        "remote": listing.remote,
        "license": listing.license_id,
        "last_update": format_timestamp(listing.last_update),
        "visibility": "public" if listing.is_public else "private",
    }
    if listing.category is not None:
        obj["category"] = listing.category.value
    return obj


def listing_from_json(obj: Mapping[str, Any]) -> RepoListing:
    category = obj.get("category")
    return RepoListing(
        name=str(obj.get("name") or ""),
        remote=str(obj["remote"]),
        license_id=str(obj["license"]),
        last_update=parse_timestamp(str(obj["last_update"])),
        is_public=str(obj.get("visibility", "public")) != "private",
        category=RepoCategory(category) if category else None,
    )


def with_category(listing: RepoListing, rules: Sequence[CategoryRule]) -> RepoListing:
    """Listing with its category filled in from the rules."""
    return replace(listing, category=assign_category(listing, rules))

"""Client for an external captioning service, plus rule-based curation.

Wire contract: POST ``{base_url}/caption`` with JSON ``{"image": <base64
PNG/JPEG bytes>, "prompt": <text>}``; the service answers 2xx with JSON
``{"caption": <string>}``. Anything else is a protocol error; failing to
reach the service at all (after retries) is an availability error, which the
template fallback can absorb.
"""

from __future__ import annotations

import base64
import time

import requests

from . import tokenizer
from .configs import CaptionerEndpoint, CurationRules
from .errors import CaptionerUnavailableError, CaptionProtocolError
from .manifest import DatasetManifest, ExampleRecord

FALLBACK_TEMPLATE = "an image of {class_name}"


def fallback_caption(class_name: str) -> str:
    return FALLBACK_TEMPLATE.format(class_name=class_name)


def fetch_caption(endpoint: CaptionerEndpoint, image_bytes: bytes,
                  prompt: str | None = None) -> str:
    """One caption for one image; raises typed errors per the wire contract."""
    url = endpoint.base_url.rstrip("/") + "/caption"
    payload = {
        "image": base64.b64encode(image_bytes).decode("ascii"),
        "prompt": prompt if prompt is not None else endpoint.prompt,
    }
    headers = {}
    if endpoint.auth_token:
        headers["Authorization"] = f"Bearer {endpoint.auth_token}"
    last_exc = None
    for attempt in range(endpoint.retries + 1):
        try:
            resp = requests.post(url, json=payload, headers=headers,
                                 timeout=endpoint.timeout)
        except (requests.Timeout, requests.ConnectionError) as exc:
            last_exc = exc
            if attempt < endpoint.retries:
                time.sleep(min(0.1 * (attempt + 1), 1.0))
            continue
        if not 200 <= resp.status_code < 300:
            raise CaptionProtocolError(
                f"captioner returned HTTP {resp.status_code}: {resp.text[:200]!r}")
        if not resp.content:
            raise CaptionProtocolError("captioner returned an empty body")
        try:
            body = resp.json()
        except ValueError as exc:
            raise CaptionProtocolError(
                f"captioner returned non-JSON body: {resp.text[:200]!r}") from exc
        caption = body.get("caption") if isinstance(body, dict) else None
        if not isinstance(caption, str) or not caption.strip():
            raise CaptionProtocolError(
                f"captioner response missing a caption string: {body!r}")
        return caption.strip()
    raise CaptionerUnavailableError(
        f"captioner at {endpoint.base_url} unreachable after "
        f"{endpoint.retries + 1} attempt(s): {last_exc}")


def caption_records(manifest: DatasetManifest, endpoint: CaptionerEndpoint,
                    fallback: bool = False, prompt: str | None = None) -> DatasetManifest:
    """Fill every record's caption from the service (or the template fallback).

    Availability failures fall back to the template when ``fallback`` is set
    and propagate otherwise; protocol errors always propagate, since they mean
    the service is answering garbage rather than being down.
    """
    new_records = []
    for rec in manifest.records:
        path = manifest.resolve_path(rec)
        try:
            caption = fetch_caption(endpoint, path.read_bytes(), prompt)
        except CaptionerUnavailableError:
            if not fallback:
                raise
            caption = fallback_caption(rec.class_name)
        new_records.append(ExampleRecord(**{**rec.to_json_dict(), "caption": caption}))
    return DatasetManifest(
        name=manifest.name,
        class_names=manifest.class_names,
        records=new_records,
        provenance={**manifest.provenance,
                    "captioner": {"base_url": endpoint.base_url,
                                  "fallback": fallback}},
        root=manifest.root,
    )


def curate_captions(records, rules: CurationRules | None = None):
    """Apply the curation rules; failing captions become the class template.

    Returns ``(new_records, report)`` where the report counts kept/replaced
    captions and, per rule, how many captions violated it (a caption may
    violate several rules but is only replaced once).
    """
    rules = rules or CurationRules()
    report = {
        "kept": 0,
        "replaced": 0,
        "by_rule": {"min_tokens": 0, "banned_phrase": 0, "missing_class_term": 0},
    }
    out = []
    for rec in records:
        caption = rec.caption or ""
        lowered = caption.lower()
        caption_words = set(tokenizer.words(caption))
        violations = []
        if len(tokenizer.words(caption)) < rules.min_tokens:
            violations.append("min_tokens")
        if any(phrase in lowered for phrase in rules.banned_phrases):
            violations.append("banned_phrase")
        if rules.require_class_term:
            class_words = set(tokenizer.words(rec.class_name))
            if not class_words <= caption_words:
                violations.append("missing_class_term")
        for rule in violations:
            report["by_rule"][rule] += 1
        if violations:
            report["replaced"] += 1
            new_caption = fallback_caption(rec.class_name)
        else:
            report["kept"] += 1
            new_caption = caption
        out.append(ExampleRecord(**{**rec.to_json_dict(), "caption": new_caption},
                                 image=rec.image))
    return out, report


def designated_captions(manifest: DatasetManifest) -> dict:
    """First non-empty train-split caption per class (classes may be absent)."""
    captions: dict = {}
    for rec in manifest.split_records("train"):
        if rec.class_name not in captions and rec.caption:
            captions[rec.class_name] = rec.caption
    return captions

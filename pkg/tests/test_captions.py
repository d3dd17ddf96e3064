"""Caption acquisition: endpoint protocol, fallbacks, rule-based curation."""

import base64
import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from defit import CaptionerEndpoint, CurationRules, curate_captions, fetch_caption
from defit.captions import (FALLBACK_TEMPLATE, caption_records,
                            designated_captions, fallback_caption)
from defit.errors import CaptionerUnavailableError, CaptionProtocolError
from defit.manifest import DatasetManifest, ExampleRecord

import torch


class _StubHandler(BaseHTTPRequestHandler):
    """Scriptable captioner endpoint; behavior is set per-test on the server."""

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        body = self.rfile.read(length)
        self.server.requests.append({
            "path": self.path,
            "headers": dict(self.headers),
            "body": json.loads(body) if body else None,
        })
        mode = self.server.mode
        if mode == "ok":
            payload = json.dumps({"caption": "  a tabby cat on a sofa  "})
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.end_headers()
            self.wfile.write(payload.encode())
        elif mode == "server_error":
            self.send_response(500)
            self.end_headers()
            self.wfile.write(b"boom")
        elif mode == "not_json":
            self.send_response(200)
            self.end_headers()
            self.wfile.write(b"plain text")
        elif mode == "missing_key":
            self.send_response(200)
            self.end_headers()
            self.wfile.write(json.dumps({"text": "nope"}).encode())
        elif mode == "empty_caption":
            self.send_response(200)
            self.end_headers()
            self.wfile.write(json.dumps({"caption": "   "}).encode())

    def log_message(self, *args):  # keep pytest output quiet
        pass


@pytest.fixture
def stub_server():
    server = HTTPServer(("127.0.0.1", 0), _StubHandler)
    server.mode = "ok"
    server.requests = []
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield server
    server.shutdown()
    thread.join(timeout=5)


def _endpoint(server, **kw):
    kw.setdefault("retries", 0)
    kw.setdefault("timeout", 5.0)
    return CaptionerEndpoint(base_url=f"http://127.0.0.1:{server.server_port}",
                             **kw)


def test_fetch_caption_happy_path(stub_server):
    caption = fetch_caption(_endpoint(stub_server), b"fakepng")
    assert caption == "a tabby cat on a sofa"  # stripped
    req = stub_server.requests[0]
    assert req["path"] == "/caption"
    assert base64.b64decode(req["body"]["image"]) == b"fakepng"
    assert req["body"]["prompt"]  # the endpoint default prompt rides along


def test_fetch_caption_sends_auth_and_custom_prompt(stub_server):
    endpoint = _endpoint(stub_server, auth_token="sekrit")
    fetch_caption(endpoint, b"img", prompt="what is shown?")
    req = stub_server.requests[0]
    assert req["headers"].get("Authorization") == "Bearer sekrit"
    assert req["body"]["prompt"] == "what is shown?"


@pytest.mark.parametrize("mode", ["server_error", "not_json", "missing_key",
                                  "empty_caption"])
def test_fetch_caption_protocol_errors(stub_server, mode):
    stub_server.mode = mode
    with pytest.raises(CaptionProtocolError):
        fetch_caption(_endpoint(stub_server), b"img")


def test_fetch_caption_unreachable():
    # nothing listens on this port; retries are exercised then exhausted
    endpoint = CaptionerEndpoint(base_url="http://127.0.0.1:9", timeout=0.2,
                                 retries=1)
    with pytest.raises(CaptionerUnavailableError):
        fetch_caption(endpoint, b"img")


def test_fallback_caption_template():
    assert FALLBACK_TEMPLATE.format(class_name="glaucoma") == \
        fallback_caption("glaucoma")
    assert fallback_caption("glaucoma") == "an image of glaucoma"


def _two_class_manifest(bench):
    return bench


def test_caption_records_fallback_on_unreachable(bench):
    endpoint = CaptionerEndpoint(base_url="http://127.0.0.1:9", timeout=0.2,
                                 retries=0)
    out = caption_records(bench, endpoint, fallback=True)
    for rec in out.records:
        assert rec.caption == f"an image of {rec.class_name}"
    assert "captioner" in out.provenance


def test_caption_records_unreachable_without_fallback(bench):
    endpoint = CaptionerEndpoint(base_url="http://127.0.0.1:9", timeout=0.2,
                                 retries=0)
    with pytest.raises(CaptionerUnavailableError):
        caption_records(bench, endpoint, fallback=False)


def test_caption_records_protocol_error_propagates(stub_server, bench):
    # fallback only covers unavailability; malformed responses always raise
    stub_server.mode = "missing_key"
    with pytest.raises(CaptionProtocolError):
        caption_records(bench, _endpoint(stub_server), fallback=True)


def test_caption_records_happy_path(stub_server, bench):
    out = caption_records(bench, _endpoint(stub_server))
    assert all(rec.caption == "a tabby cat on a sofa" for rec in out.records)
    assert len(stub_server.requests) == len(bench.records)


# ----------------------------------------------------------------- curation

def _rec(i, caption, cls="melanoma"):
    names = ("melanoma", "nevus")
    label = names.index(cls)
    return ExampleRecord(example_id=f"c{i}", caption=caption, label=label,
                         class_name=cls, split="train", source_dataset="unit",
                         image=torch.zeros(3, 4, 4))


def test_curate_captions_rules():
    records = [
        _rec(0, "a dermoscopic view of melanoma with irregular borders"),
        _rec(1, "melanoma lesion"),                        # too few tokens
        _rec(2, "I cannot describe this image of melanoma with certainty and detail"),  # banned
        _rec(3, "as an AI I will not caption this melanoma slide"),  # banned
        _rec(4, "a pigmented lesion with asymmetric shape"),  # missing class term
        _rec(5, "sorry, no caption for this melanoma image"),  # banned
        _rec(6, "close-up photograph showing melanoma near the ear"),
        _rec(7, "an image of an image of melanoma region"),  # banned phrase
        _rec(8, "  "),                                      # empty: too few tokens
        _rec(9, "benign nevus with uniform brown pigment", cls="nevus"),
    ]
    curated, report = curate_captions(records)
    assert report["kept"] == 3
    assert report["replaced"] == 7
    assert report["by_rule"]["min_tokens"] == 2
    assert report["by_rule"]["banned_phrase"] == 4
    assert report["by_rule"]["missing_class_term"] >= 1
    for rec in curated:
        if rec.example_id in {"c1", "c2", "c3", "c4", "c5", "c7", "c8"}:
            assert rec.caption == f"an image of {rec.class_name}"
    # kept captions pass through untouched
    assert curated[0].caption == records[0].caption
    assert curated[9].caption == records[9].caption


def test_curate_multi_violation_counts_each_rule_once():
    # one caption violating two rules increments both rule counters but is
    # replaced exactly once
    records = [_rec(0, "sorry"), _rec(1, "fine melanoma presentation today")]
    curated, report = curate_captions(records)
    assert report["replaced"] == 1
    assert report["by_rule"]["min_tokens"] == 1
    assert report["by_rule"]["banned_phrase"] == 1


def test_curate_class_term_multiword():
    # every word of a multi-word class name must appear in the caption
    names = ("basal cell", "nevus")
    rec = ExampleRecord(example_id="m0",
                        caption="basal region of the lesion shown clearly",
                        label=0, class_name="basal cell", split="train",
                        source_dataset="unit", image=torch.zeros(3, 4, 4))
    curated, report = curate_captions([rec])
    assert report["by_rule"]["missing_class_term"] == 1
    assert curated[0].caption == "an image of basal cell"


def test_curate_respects_custom_rules():
    records = [_rec(0, "short melanoma text")]
    strict = CurationRules(min_tokens=10)
    curated, report = curate_captions(records, strict)
    assert report["replaced"] == 1
    lax = CurationRules(min_tokens=1, require_class_term=False,
                        banned_phrases=())
    curated, report = curate_captions(records, lax)
    assert report["kept"] == 1


def test_designated_captions(bench):
    chosen = designated_captions(bench)
    assert set(chosen) == set(bench.class_names)
    for cls, caption in chosen.items():
        train = [r for r in bench.split_records("train")
                 if r.class_name == cls]
        assert caption == train[0].caption

"""Minimal JSON-over-HTTP POST used by the backend and predictor clients."""

from __future__ import annotations

import base64
import json
import urllib.error
import urllib.request
from pathlib import Path


class HttpError(RuntimeError):
    pass


def post_json(url: str, payload: dict, headers: dict | None = None, timeout: float = 60.0):
    body = json.dumps(payload).encode("utf-8")
    req = urllib.request.Request(url, data=body, method="POST")
    req.add_header("Content-Type", "application/json")
    for k, v in (headers or {}).items():
        req.add_header(k, v)
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return json.loads(resp.read().decode("utf-8"))
    except urllib.error.HTTPError as e:
        raise HttpError(f"{url}: HTTP {e.code}") from None
    except (urllib.error.URLError, OSError) as e:
        raise HttpError(f"{url}: {e}") from None
    except json.JSONDecodeError as e:
        raise HttpError(f"{url}: reply is not JSON ({e.msg})") from None


def join_url(base: str, path: str) -> str:
    return base.rstrip("/") + "/" + path.lstrip("/")


def b64_file(path: str | Path) -> str:
    return base64.b64encode(Path(path).read_bytes()).decode("ascii")

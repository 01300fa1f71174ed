"""Server-to-server covert channels through unwitting HTTP clients.

Each channel is a pair of pure functions: an encoder producing what one
server hands the browser (a redirect URL, cookies, HTML) and a decoder for
what the other server sees arrive.  Capacity limits are protocol constants:

* redirect / referer: 1024 URL-encoded payload bytes
* cookie value: 4096 bytes, at most 40 cookies per server
* form POST: unbounded; this is what nodes use to move slots

Slots travel inside form fields and cookies in unpadded URL-safe base64.
"""

from __future__ import annotations

import base64
import enum
import html as htmllib
import re
from dataclasses import dataclass
from urllib.parse import parse_qs, quote_from_bytes, unquote_to_bytes, urlsplit, urlunsplit

from .crypto import SLOT_SIZE
from .node import NodeResponse, ResponseKind

REDIRECT_LIMIT = 1024
COOKIE_VALUE_LIMIT = 4096
COOKIE_COUNT_LIMIT = 40
FORM_FIELD = "m"

# Documents are padded to these sizes so response length says nothing beyond
# carrier vs. static.
CARRIER_SIZE = 6144
STATIC_SIZE = 1600
MAX_TARGET_LEN = 512


class ChannelError(ValueError):
    pass


class CapacityError(ChannelError):
    pass


class Behavior(enum.Enum):
    AUTO_SUBMIT_POST = "auto_submit_post"
    META_REFRESH = "meta_refresh"
    STATIC = "static"


class MetaKind(enum.Enum):
    REFRESH = "refresh"
    SET_COOKIE = "set_cookie"


# --------------------------------------------------------------------------
# Transport encoding


def transport_encode(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def transport_decode(text: str) -> bytes:
    if not re.fullmatch(r"[A-Za-z0-9_-]*", text) or len(text) % 4 == 1:
        raise ChannelError("not a transport-encoded value")
    return base64.urlsafe_b64decode(text + "=" * (-len(text) % 4))


# --------------------------------------------------------------------------
# Cookies


def validate_cookie_domain(domain: str) -> bool:
    """Dot rule for the cookie ``domain`` attribute.

    A domain ending in a two-letter TLD needs at least three dots; one ending
    in a three-letter (or longer) TLD needs at least two.
    """
    if not domain or domain.endswith(".") or ".." in domain:
        return False
    tld = domain.rsplit(".", 1)[-1]
    if not tld.isalpha():
        return False
    dots = domain.count(".")
    if len(tld) == 2:
        return dots >= 3
    if len(tld) >= 3:
        return dots >= 2
    return False


@dataclass(frozen=True)
class CookieCarrier:
    key: str
    value: str
    domain: str
    path: str = "/"

    def __post_init__(self):
        if len(self.value) > COOKIE_VALUE_LIMIT:
            raise CapacityError(f"cookie value of {len(self.value)} bytes exceeds {COOKIE_VALUE_LIMIT}")
        if not validate_cookie_domain(self.domain):
            raise ChannelError(f"cookie domain {self.domain!r} fails the dot rule")
        if not re.fullmatch(r"[A-Za-z0-9_.-]+", self.key):
            raise ChannelError(f"bad cookie key {self.key!r}")

    def header(self) -> str:
        """``Set-Cookie`` header value."""
        return f"{self.key}={self.value}; domain={self.domain}; path={self.path}"


class CookieJar:
    """Client-side store honoring the per-server cookie limit."""

    def __init__(self):
        self._by_domain: dict[str, dict[str, CookieCarrier]] = {}

    def set(self, cookie: CookieCarrier) -> None:
        jar = self._by_domain.setdefault(cookie.domain, {})
        if cookie.key not in jar and len(jar) >= COOKIE_COUNT_LIMIT:
            raise CapacityError(f"more than {COOKIE_COUNT_LIMIT} cookies for {cookie.domain}")
        jar[cookie.key] = cookie

    def for_host(self, host: str) -> list[CookieCarrier]:
        out = []
        for domain, jar in self._by_domain.items():
            if ("." + host).endswith(domain if domain.startswith(".") else "." + domain):
                out.extend(jar.values())
        return out

    def __len__(self):
        return sum(len(j) for j in self._by_domain.values())


def encode_cookie_stream(payload: bytes, domain: str, key_prefix: str = "c") -> list[CookieCarrier]:
    text = transport_encode(payload)
    if len(text) > COOKIE_COUNT_LIMIT * COOKIE_VALUE_LIMIT:
        raise CapacityError(
            f"{len(text)} encoded bytes exceed {COOKIE_COUNT_LIMIT} cookies of {COOKIE_VALUE_LIMIT}"
        )
    chunks = [text[i: i + COOKIE_VALUE_LIMIT] for i in range(0, len(text), COOKIE_VALUE_LIMIT)] or [""]
    return [CookieCarrier(f"{key_prefix}{i}", c, domain) for i, c in enumerate(chunks)]


def decode_cookie_stream(cookies: list[CookieCarrier], key_prefix: str = "c") -> bytes:
    parts = []
    for c in cookies:
        suffix = c.key[len(key_prefix):]
        if c.key.startswith(key_prefix) and suffix.isdigit():
            parts.append((int(suffix), c.value))
    parts.sort()
    if [i for i, _ in parts] != list(range(len(parts))):
        raise ChannelError("cookie stream has gaps")
    return transport_decode("".join(v for _, v in parts))


# --------------------------------------------------------------------------
# Redirects and referers


@dataclass(frozen=True)
class RedirectCarrier:
    target: str
    query: str

    @property
    def url(self) -> str:
        return f"{self.target}?{self.query}"


def encode_redirect(payload: bytes, script_url: str, **extra: str) -> RedirectCarrier:
    """Carry ``payload`` in the ``d`` query parameter of a redirect to ``script_url``."""
    encoded = quote_from_bytes(payload, safe="")
    if len(encoded) > REDIRECT_LIMIT:
        raise CapacityError(f"{len(encoded)} URL-encoded bytes exceed redirect limit {REDIRECT_LIMIT}")
    query = "d=" + encoded
    for k, v in extra.items():
        query += f"&{k}={quote_from_bytes(str(v).encode(), safe='')}"
    return RedirectCarrier(script_url, query)


def decode_redirect(carrier: RedirectCarrier | str) -> bytes:
    query = carrier.query if isinstance(carrier, RedirectCarrier) else urlsplit(carrier).query
    for pair in query.split("&"):
        key, _, value = pair.partition("=")
        if key == "d":
            return unquote_to_bytes(value)
    raise ChannelError("no payload parameter")


def split_redirects(slot: bytes, script_url: str, token: str) -> list[RedirectCarrier]:
    """Fragment a slot over as many redirect-sized requests as needed."""
    text = transport_encode(slot).encode("ascii")
    frags = [text[i: i + REDIRECT_LIMIT] for i in range(0, len(text), REDIRECT_LIMIT)]
    return [encode_redirect(f, script_url, i=str(i), n=str(len(frags)), t=token) for i, f in enumerate(frags)]


def join_redirects(fragments: dict[int, bytes], n: int) -> bytes:
    if sorted(fragments) != list(range(n)):
        raise ChannelError("missing redirect fragments")
    return transport_decode(b"".join(fragments[i] for i in range(n)).decode("ascii"))


def decode_referer(header_value: str | None) -> str | None:
    """Origin URL of the sending script (query and fragment stripped)."""
    if header_value is None or len(header_value.encode("utf-8", "replace")) > REDIRECT_LIMIT:
        return None
    try:
        parts = urlsplit(header_value.strip())
    except ValueError:
        return None
    if parts.scheme not in ("http", "https") or not parts.netloc:
        return None
    return urlunsplit((parts.scheme, parts.netloc.lower(), parts.path or "/", "", ""))


# --------------------------------------------------------------------------
# HTML


def emit_meta(kind: MetaKind, *args) -> str:
    """HTTP header smuggled into the document body.

    ``emit_meta(REFRESH, delay, url)`` or ``emit_meta(SET_COOKIE, cookie)``.
    """
    if kind is MetaKind.REFRESH:
        delay, url = args
        if int(delay) < 0:
            raise ChannelError("negative refresh delay")
        return f'<META HTTP-EQUIV="Refresh" CONTENT="{int(delay)};URL={htmllib.escape(url)}">'
    if kind is MetaKind.SET_COOKIE:
        (cookie,) = args
        if not validate_cookie_domain(cookie.domain):
            raise ChannelError(f"cookie domain {cookie.domain!r} fails the dot rule")
        return (f'<META HTTP-EQUIV="Set-Cookie" '
                f'CONTENT="{cookie.key}={cookie.value};path={cookie.path};domain={cookie.domain}">')
    raise ChannelError(f"unknown meta kind {kind!r}")


def emit_auto_request(element: str, url: str) -> str:
    """An HTML element that makes the browser fetch ``url`` on its own."""
    if element == "meta":
        return emit_meta(MetaKind.REFRESH, 0, url)
    url = htmllib.escape(url)
    if element == "iframe":
        return f'<iframe src="{url}" width="0" height="0" frameborder="0"></iframe>'
    if element == "img":
        return f'<img src="{url}" width="1" height="1" alt="">'
    if element == "script":
        return f'<script type="text/javascript" src="{url}"></script>'
    raise ChannelError(f"unsupported element {element!r}")


@dataclass(frozen=True)
class CarrierDocument:
    html: str
    behavior: Behavior
    embedded_slot: bytes | None = None
    target: str | None = None

    @property
    def body(self) -> bytes:
        return self.html.encode("utf-8")


_DOCTYPE = '<!DOCTYPE HTML PUBLIC "-//W3C//DTD HTML 4.01 Transitional//EN">\n'

_STATIC_HTML = (
    _DOCTYPE
    + "<html><head><title>ad</title>\n"
    '<meta http-equiv="Content-Type" content="text/html; charset=utf-8">\n'
    "<style type=\"text/css\">\n"
    "body { margin: 0; padding: 0; background: #ffffff; }\n"
    "div.slot { width: 1px; height: 1px; overflow: hidden; }\n"
    "</style></head>\n"
    '<body><div class="slot"></div></body></html>\n'
)


def _pad(text: str, size: int) -> str:
    if len(text) >= size:
        return text
    return text + " " * (size - len(text) - 1) + "\n"


STATIC_DOCUMENT = CarrierDocument(_pad(_STATIC_HTML, STATIC_SIZE), Behavior.STATIC)


def _auto_submit_html(slot: bytes, target: str) -> str:
    return (
        _DOCTYPE
        + "<html><head><title>ad</title></head>\n<body>\n"
        f'<form method="POST" action="{htmllib.escape(target)}" '
        'enctype="application/x-www-form-urlencoded" style="display:none">\n'
        f'<input type="hidden" name="{FORM_FIELD}" value="{transport_encode(slot)}">\n'
        "</form>\n"
        '<script type="text/javascript">document.forms[0].submit();</script>\n'
        "</body></html>\n"
    )


def _refresh_html(slot: bytes, target: str, token: str) -> str:
    frags = split_redirects(slot, target, token)
    lines = [_DOCTYPE + "<html><head><title>ad</title>"]
    lines.append(emit_meta(MetaKind.REFRESH, 0, frags[-1].url))
    lines.append("</head><body>")
    lines.extend(emit_auto_request("img", f.url) for f in frags[:-1])
    lines.append("</body></html>\n")
    return "\n".join(lines)


def emit_carrier(response: NodeResponse, from_url: str | None = None,
                 behavior: Behavior = Behavior.AUTO_SUBMIT_POST, token: str = "0") -> CarrierDocument:
    """Render a node response as the document the client receives.

    The browser supplies ``from_url`` as the Referer of the follow-up request,
    so it does not appear in the document.
    """
    if response.kind is ResponseKind.FIXED_HTML:
        return STATIC_DOCUMENT
    slot, target = response.carry_slot, response.carry_target
    if slot is None or target is None:
        raise ChannelError("CARRY response without slot or target")
    if len(slot) != SLOT_SIZE:
        raise ChannelError("carried slot has wrong size")
    if len(target) > MAX_TARGET_LEN:
        raise ChannelError("target URL too long")
    if behavior is Behavior.META_REFRESH:
        return CarrierDocument(_refresh_html(slot, target, token), behavior, slot, target)
    html = _pad(_auto_submit_html(slot, target), CARRIER_SIZE)
    return CarrierDocument(html, Behavior.AUTO_SUBMIT_POST, slot, target)


_FORM_RE = re.compile(
    r'<form method="POST" action="([^"]*)"[^>]*>\s*'
    r'<input type="hidden" name="' + FORM_FIELD + r'" value="([A-Za-z0-9_-]*)">'
)


def parse_carrier(html: str) -> tuple[str, bytes] | None:
    """What a browser executing the document would POST: (action, slot)."""
    m = _FORM_RE.search(html)
    if m is None:
        return None
    return htmllib.unescape(m.group(1)), transport_decode(m.group(2))


def form_body(slot: bytes, double: bool = False) -> bytes:
    """``application/x-www-form-urlencoded`` POST body for a slot."""
    field = transport_encode(slot)
    if double:
        field += transport_encode(slot)
    return f"{FORM_FIELD}={field}".encode("ascii")


def parse_form_body(body: bytes) -> bytes | None:
    """Slot in a POST body, or ``None`` if the field is missing or malformed."""
    try:
        fields = parse_qs(body.decode("ascii"), keep_blank_values=True, strict_parsing=False)
        (value,) = fields[FORM_FIELD]
        slot = transport_decode(value)
    except (UnicodeDecodeError, KeyError, ValueError):
        return None
    return slot if len(slot) == SLOT_SIZE else None


# --------------------------------------------------------------------------
# Frameset served to linker iframes


def emit_frameset(inner: CarrierDocument, banner_url: str) -> str:
    """Two frames: the visible banner and an invisible frame holding ``inner``."""
    data = base64.b64encode(inner.body).decode("ascii")
    return (
        '<!DOCTYPE HTML PUBLIC "-//W3C//DTD HTML 4.01 Frameset//EN">\n'
        "<html><head><title>banner</title></head>\n"
        '<frameset rows="*,0" frameborder="0" border="0">\n'
        f'<frame src="{htmllib.escape(banner_url)}" scrolling="no" noresize>\n'
        f'<frame src="data:text/html;base64,{data}" scrolling="no" noresize>\n'
        "</frameset></html>\n"
    )


_FRAME_RE = re.compile(r'<frame src="data:text/html;base64,([A-Za-z0-9+/=]*)"')


def frameset_inner(html: str) -> str | None:
    m = _FRAME_RE.search(html)
    return base64.b64decode(m.group(1)).decode("utf-8") if m else None

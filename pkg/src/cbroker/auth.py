"""Client identity: certificate-derived auth hashes, TLS contexts, groups."""
from __future__ import annotations

import hashlib
import json
import ssl
from pathlib import Path
from typing import Mapping

from .matching import is_auth_hash

AUTH_HEADER = "X-Auth-Hash"


class AuthError(Exception):
    pass


def auth_hash_from_der(der: bytes) -> str:
    return hashlib.sha256(der).hexdigest()


def auth_hash_from_pem(pem: str | bytes) -> str:
    if isinstance(pem, bytes):
        pem = pem.decode("ascii")
    return auth_hash_from_der(ssl.PEM_cert_to_DER_cert(pem))


def auth_hash_from_cert_file(path: str | Path) -> str:
    return auth_hash_from_pem(Path(path).read_text())


def request_auth_hash(request, mode: str) -> str:
    """Identify the caller of an aiohttp request.

    ``mtls`` hashes the verified peer certificate; ``header`` trusts the
    X-Auth-Hash header (only for deployments behind a trusted front end).
    """
    if mode == "mtls":
        sslobj = request.transport.get_extra_info("ssl_object") if request.transport else None
        der = sslobj.getpeercert(binary_form=True) if sslobj is not None else None
        if not der:
            raise AuthError("no client certificate presented")
        return auth_hash_from_der(der)
    if mode == "header":
        value = request.headers.get(AUTH_HEADER, "")
        if not is_auth_hash(value):
            raise AuthError(f"missing or malformed {AUTH_HEADER} header")
        return value
    raise ValueError(f"unknown auth mode {mode!r}")


def server_ssl_context(certfile: str, keyfile: str, cafile: str | None = None,
                       require_client_cert: bool = True) -> ssl.SSLContext:
    ctx = ssl.create_default_context(ssl.Purpose.CLIENT_AUTH)
    ctx.load_cert_chain(certfile, keyfile)
    if cafile:
        ctx.load_verify_locations(cafile)
    if require_client_cert:
        ctx.verify_mode = ssl.CERT_REQUIRED
    return ctx


def client_ssl_context(cafile: str | None = None, certfile: str | None = None,
                       keyfile: str | None = None) -> ssl.SSLContext:
    ctx = ssl.create_default_context(ssl.Purpose.SERVER_AUTH, cafile=cafile)
    if certfile:
        ctx.load_cert_chain(certfile, keyfile)
    return ctx


def load_groups(source: str | Path | Mapping | None) -> dict[str, frozenset[str]]:
    """Read the startup group map ``{auth_hash: [group, ...]}``."""
    if source is None:
        return {}
    if isinstance(source, Mapping):
        raw = source
    else:
        raw = json.loads(Path(source).read_text())
    groups = {}
    for auth, names in raw.items():
        if not is_auth_hash(auth):
            raise ValueError(f"bad auth hash in group map: {auth!r}")
        if isinstance(names, str) or not all(isinstance(n, str) for n in names):
            raise ValueError(f"groups for {auth} must be a list of strings")
        groups[auth] = frozenset(names)
    return groups

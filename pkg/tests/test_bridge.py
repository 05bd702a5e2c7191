import base64
import sys

import numpy as np
import pytest

from layoutlearn.bridge import (
    Bridge,
    BridgeConfig,
    BridgeProtocolError,
    BridgeTimeoutError,
    decode_image,
    encode_image,
)
from layoutlearn.echo_server import ECHO_SCORE, EchoLogic, EchoServer


def image(seed=0, shape=(5, 7, 3)):
    return np.random.default_rng(seed).standard_normal(shape).astype(np.float32)


def test_wire_encoding_is_little_endian_f32():
    img = image()
    payload, w, h = encode_image(img)
    assert (w, h) == (7, 5)
    raw = base64.b64decode(payload)
    assert raw == img.astype("<f4").tobytes()
    assert np.array_equal(decode_image(payload, w, h), img)
    with pytest.raises(BridgeProtocolError):
        decode_image(payload, 6, 5)
    with pytest.raises(BridgeProtocolError):
        decode_image("***", 1, 1)
    with pytest.raises(ValueError):
        encode_image(np.zeros((3, 3)))


def test_echo_roundtrip_preserves_bytes():
    img = image()
    with EchoServer() as srv, Bridge(BridgeConfig(srv.endpoint, timeout=5)) as b:
        out = b.denoise(img, 0.5, "a chair", cfg=7.5)
        assert out.dtype == np.float64
        assert out.astype("<f4").tobytes() == img.astype("<f4").tobytes()
        assert b.score(img, "a chair") == ECHO_SCORE


def test_subprocess_transport():
    cmd = f"{sys.executable} -m layoutlearn.echo_server --stdio"
    with Bridge(BridgeConfig(cmd, timeout=10, transport="subprocess")) as b:
        img = image(1)
        assert np.array_equal(b.denoise(img, 0.3, "x").astype(np.float32), img)
        assert b.score(img, "x") == ECHO_SCORE


def test_default_guidance_strength_sent():
    sent = []

    class Spy(Bridge):
        def request(self, body):
            sent.append(body)
            return {"eps_hat": body["rgb"]}

    Spy(BridgeConfig("127.0.0.1:1")).denoise(image(), 0.2, "p")
    assert sent[0]["cfg"] == 200.0 and sent[0]["kind"] == "denoise"


def test_timeout_raises_after_retries():
    with EchoServer("hang") as srv, Bridge(BridgeConfig(srv.endpoint, timeout=0.1, max_retries=2)) as b:
        with pytest.raises(BridgeTimeoutError) as info:
            b.denoise(image(), 0.5, "p")
        assert info.value.retriable
        assert b._next_id == 4  # one attempt plus two retries


def test_retry_recovers_and_skips_stale_reply():
    with EchoServer("slow-first") as srv, Bridge(BridgeConfig(srv.endpoint, timeout=0.2, max_retries=1)) as b:
        img = image(2)
        assert np.array_equal(b.denoise(img, 0.5, "p").astype(np.float32), img)
    with EchoServer("stale") as srv, Bridge(BridgeConfig(srv.endpoint, timeout=2)) as b:
        assert b.score(image(), "p") == ECHO_SCORE


@pytest.mark.parametrize("mode", ["malformed", "wrong-length", "bad-id", "error"])
def test_protocol_errors(mode):
    with EchoServer(mode) as srv, Bridge(BridgeConfig(srv.endpoint, timeout=2, max_retries=0)) as b:
        with pytest.raises(BridgeProtocolError) as info:
            b.denoise(image(), 0.5, "p")
        assert not info.value.retriable


def test_connect_failure_and_config_checks():
    with pytest.raises(BridgeProtocolError):
        Bridge(BridgeConfig("127.0.0.1:1", timeout=0.5)).score(image(), "p")
    with pytest.raises(ValueError):
        BridgeConfig("x", timeout=0)
    with pytest.raises(ValueError):
        BridgeConfig("x", transport="carrier-pigeon")


def test_echo_logic_stale_mode_sends_old_id_first():
    lines = EchoLogic("stale").respond(b'{"id": 5, "kind": "score", "rgb": ""}')
    assert [l.count(b'"id": 4') for l in lines] == [1, 0]

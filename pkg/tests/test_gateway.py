"""Endpoint access layer: mocks, retries, wire format, token accounting."""

import json
import random
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest
from hypothesis import given, strategies as st

from helpers import make_gateway, mock_profile
from tooldebate.gateway import (
    BACKOFF_FACTOR,
    BACKOFF_JITTER,
    ChatMessage,
    ChatRequest,
    EndpointProfile,
    ExhaustedRetries,
    ImageAttachment,
    MalformedWireResponse,
    MockFailure,
    NotAMockEndpoint,
    RequestRejected,
    ScriptExhausted,
    Timeout,
    TransientBackendError,
    backoff_delay_ms,
    build_wire_payload,
    parse_wire_response,
)

REQUEST = ChatRequest.user("What animal is shown?")


class TestProfiles:
    def test_mock_detection(self):
        assert mock_profile("m").is_mock
        assert not mock_profile("h", base_url="http://127.0.0.1:9").is_mock

    def test_rejects_bad_temperature(self):
        with pytest.raises(ValueError, match="temperature"):
            mock_profile("m", temperature=2.5)

    def test_rejects_negative_retries(self):
        with pytest.raises(ValueError, match="max_retries"):
            mock_profile("m", max_retries=-1)

    def test_rejects_unknown_role(self):
        with pytest.raises(ValueError, match="role_hint"):
            mock_profile("m", role_hint="oracle")

    def test_rejects_empty_id(self):
        with pytest.raises(ValueError, match="endpoint_id"):
            EndpointProfile(endpoint_id="", base_url="mock://x", model_name="m")


class TestChatRequest:
    def test_needs_a_user_message(self):
        with pytest.raises(ValueError, match="user message"):
            ChatRequest(messages=(ChatMessage("system", "be brief"),))

    def test_images_only_on_user_turns(self):
        image = ImageAttachment(data=b"\x89PNG")
        with pytest.raises(ValueError, match="user messages"):
            ChatRequest(
                messages=(
                    ChatMessage("user", "hi"),
                    ChatMessage("assistant", "hello", images=(image,)),
                )
            )

    def test_image_needs_exactly_one_source(self):
        with pytest.raises(ValueError):
            ImageAttachment()
        with pytest.raises(ValueError):
            ImageAttachment(data=b"x", url="http://example.test/i.png")

    def test_image_digest_is_stable(self):
        a = ImageAttachment(data=b"pixels")
        b = ImageAttachment(data=b"pixels")
        assert a.digest() == b.digest()
        assert len(a.digest()) == 64

    def test_data_url_embeds_base64(self):
        image = ImageAttachment(media_type="image/png", data=b"pix")
        assert image.as_data_url() == "data:image/png;base64,cGl4"


class TestMockScripts:
    def test_replies_consumed_in_order(self):
        gateway = make_gateway(mock_profile("m"))
        gateway.register_mock_script("m", ["first", "second"])
        assert gateway.send_chat("m", REQUEST).text == "first"
        assert gateway.send_chat("m", REQUEST).text == "second"

    def test_remaining_script_counts_down(self):
        gateway = make_gateway(mock_profile("m"))
        gateway.register_mock_script("m", ["a", "b", "c"])
        gateway.send_chat("m", REQUEST)
        assert gateway.remaining_script("m") == 2

    def test_exhausted_script_raises(self):
        gateway = make_gateway(mock_profile("m"))
        gateway.register_mock_script("m", ["only"])
        gateway.send_chat("m", REQUEST)
        with pytest.raises(ScriptExhausted):
            gateway.send_chat("m", REQUEST)

    def test_no_script_at_all_raises(self):
        gateway = make_gateway(mock_profile("m"))
        with pytest.raises(ScriptExhausted):
            gateway.send_chat("m", REQUEST)

    def test_reregistering_resets_the_cursor(self):
        gateway = make_gateway(mock_profile("m"))
        gateway.register_mock_script("m", ["old"])
        gateway.send_chat("m", REQUEST)
        gateway.register_mock_script("m", ["new"])
        assert gateway.send_chat("m", REQUEST).text == "new"

    def test_rejects_script_for_http_endpoint(self):
        gateway = make_gateway(mock_profile("h", base_url="http://127.0.0.1:9"))
        with pytest.raises(NotAMockEndpoint):
            gateway.register_mock_script("h", ["nope"])

    def test_rejects_non_string_entries(self):
        gateway = make_gateway(mock_profile("m"))
        with pytest.raises(TypeError):
            gateway.register_mock_script("m", [42])

    def test_unregistered_profile_is_added_on_send(self):
        gateway = make_gateway()
        profile = mock_profile("late")
        gateway.add_profile(profile)
        gateway.register_mock_script("late", ["hi"])
        assert gateway.send_chat(profile, REQUEST).text == "hi"

    def test_unknown_endpoint_id_raises_keyerror(self):
        gateway = make_gateway()
        with pytest.raises(KeyError, match="nowhere"):
            gateway.send_chat("nowhere", REQUEST)


class TestRetries:
    def test_scripted_failure_then_success(self):
        sleeps = []
        gateway = make_gateway(mock_profile("m", max_retries=1), sleep=sleeps.append)
        gateway.register_mock_script("m", [MockFailure("blip"), "recovered"])
        assert gateway.send_chat("m", REQUEST).text == "recovered"
        assert gateway.attempts("m") == 2
        assert len(sleeps) == 1

    def test_exhausting_retries_raises_with_last_error(self):
        gateway = make_gateway(mock_profile("m", max_retries=2))
        gateway.register_mock_script("m", [MockFailure("one"), MockFailure("two"), MockFailure("three")])
        with pytest.raises(ExhaustedRetries) as info:
            gateway.send_chat("m", REQUEST)
        assert info.value.attempts == 3
        assert isinstance(info.value.last_error, TransientBackendError)
        assert "three" in str(info.value.last_error)

    def test_zero_retries_means_one_attempt(self):
        gateway = make_gateway(mock_profile("m", max_retries=0))
        gateway.register_mock_script("m", [MockFailure("boom"), "unreached"])
        with pytest.raises(ExhaustedRetries) as info:
            gateway.send_chat("m", REQUEST)
        assert info.value.attempts == 1
        assert gateway.remaining_script("m") == 1

    def test_backoff_delays_grow_exponentially(self):
        sleeps = []
        gateway = make_gateway(
            mock_profile("m", max_retries=3),
            sleep=sleeps.append,
            backoff_base_ms=100.0,
        )
        gateway.register_mock_script(
            "m", [MockFailure(), MockFailure(), MockFailure(), "ok"]
        )
        gateway.send_chat("m", REQUEST)
        assert len(sleeps) == 3
        for attempt, seconds in enumerate(sleeps):
            nominal = 0.1 * (BACKOFF_FACTOR ** attempt)
            assert nominal * (1 - BACKOFF_JITTER) <= seconds <= nominal * (1 + BACKOFF_JITTER)

    @given(st.integers(min_value=0, max_value=8), st.integers(min_value=0, max_value=2**32 - 1))
    def test_backoff_delay_stays_in_jitter_band(self, attempt, seed):
        delay = backoff_delay_ms(attempt, 250.0, random.Random(seed))
        nominal = 250.0 * (BACKOFF_FACTOR ** attempt)
        assert nominal * (1 - BACKOFF_JITTER) <= delay <= nominal * (1 + BACKOFF_JITTER)

    def test_contacted_endpoints_tracks_attempts(self):
        gateway = make_gateway(mock_profile("m"), mock_profile("silent"))
        gateway.register_mock_script("m", ["hi"])
        gateway.send_chat("m", REQUEST)
        assert gateway.contacted_endpoints() == {"m"}


class TestLedger:
    def test_mock_usage_is_approximate_word_counts(self):
        gateway = make_gateway(mock_profile("m"))
        gateway.register_mock_script("m", ["three short words"])
        response = gateway.send_chat("m", REQUEST, tag="q1")
        assert response.approximate_usage
        assert response.completion_tokens == 3
        assert response.prompt_tokens == len("What animal is shown?".split())

    def test_totals_filter_by_tag(self):
        gateway = make_gateway(mock_profile("m"))
        gateway.register_mock_script("m", ["a b", "c"])
        gateway.send_chat("m", REQUEST, tag="q1")
        gateway.send_chat("m", REQUEST, tag="q2")
        assert gateway.ledger.totals("q1")["completion_tokens"] == 2
        assert gateway.ledger.totals("q1")["calls"] == 1
        assert gateway.ledger.totals()["calls"] == 2


class TestWireFormat:
    def test_payload_shape_for_text_only(self):
        payload = build_wire_payload(mock_profile("m", temperature=0.3), REQUEST)
        assert payload["model"] == "m-model"
        assert payload["temperature"] == 0.3
        assert payload["messages"] == [{"role": "user", "content": "What animal is shown?"}]

    def test_payload_shape_with_image_parts(self):
        image = ImageAttachment(media_type="image/png", data=b"pix")
        request = ChatRequest.user("look", [image])
        payload = build_wire_payload(mock_profile("m"), request)
        content = payload["messages"][0]["content"]
        assert content[0] == {"type": "text", "text": "look"}
        assert content[1]["type"] == "image_url"
        assert content[1]["image_url"]["url"].startswith("data:image/png;base64,")

    def test_parse_valid_body(self):
        body = {
            "choices": [{"message": {"content": "hello"}}],
            "usage": {"prompt_tokens": 5, "completion_tokens": 1},
        }
        text, usage = parse_wire_response(body)
        assert text == "hello"
        assert usage == {"prompt_tokens": 5, "completion_tokens": 1}

    def test_parse_typed_content_parts(self):
        body = {
            "choices": [
                {"message": {"content": [{"type": "text", "text": "he"}, {"type": "text", "text": "llo"}]}}
            ]
        }
        text, usage = parse_wire_response(body)
        assert text == "hello"
        assert usage is None

    @pytest.mark.parametrize(
        "body",
        [
            "not a dict",
            {},
            {"choices": []},
            {"choices": [{"message": None}]},
            {"choices": [{"message": {"content": 42}}]},
        ],
    )
    def test_parse_rejects_malformed_bodies(self, body):
        with pytest.raises(MalformedWireResponse):
            parse_wire_response(body)


class _ChatHandler(BaseHTTPRequestHandler):
    """Serves queued (status, body) pairs and records incoming requests."""

    responses: list = []
    seen: list = []
    lock = threading.Lock()

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        raw = self.rfile.read(length)
        with self.lock:
            type(self).seen.append(
                {
                    "path": self.path,
                    "auth": self.headers.get("Authorization"),
                    "body": json.loads(raw),
                }
            )
            status, body = type(self).responses.pop(0)
        encoded = body.encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(encoded)))
        self.end_headers()
        self.wfile.write(encoded)

    def log_message(self, *args):
        pass


@pytest.fixture
def chat_server():
    _ChatHandler.responses = []
    _ChatHandler.seen = []
    server = ThreadingHTTPServer(("127.0.0.1", 0), _ChatHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield server, _ChatHandler
    finally:
        server.shutdown()
        server.server_close()


def _http_profile(server, **kwargs):
    host, port = server.server_address
    return mock_profile("h", base_url=f"http://{host}:{port}", **kwargs)


def _ok_body(text, prompt_tokens=11, completion_tokens=7):
    return json.dumps(
        {
            "choices": [{"message": {"content": text}}],
            "usage": {"prompt_tokens": prompt_tokens, "completion_tokens": completion_tokens},
        }
    )


class TestHttpBackend:
    def test_roundtrip_hits_chat_completions(self, chat_server):
        server, handler = chat_server
        handler.responses.append((200, _ok_body("a fox")))
        gateway = make_gateway(_http_profile(server))
        response = gateway.send_chat("h", REQUEST)
        assert response.text == "a fox"
        assert response.prompt_tokens == 11
        assert response.completion_tokens == 7
        assert not response.approximate_usage
        assert handler.seen[0]["path"] == "/chat/completions"
        assert handler.seen[0]["body"]["messages"][0]["content"] == "What animal is shown?"
        gateway.close()

    def test_bearer_token_comes_from_named_env_var(self, chat_server):
        server, handler = chat_server
        handler.responses.append((200, _ok_body("ok")))
        gateway = make_gateway(
            _http_profile(server, api_key_env="TEST_CHAT_KEY"),
            env={"TEST_CHAT_KEY": "sekrit"},
        )
        gateway.send_chat("h", REQUEST)
        assert handler.seen[0]["auth"] == "Bearer sekrit"
        gateway.close()

    def test_missing_key_sends_no_auth_header(self, chat_server):
        server, handler = chat_server
        handler.responses.append((200, _ok_body("ok")))
        gateway = make_gateway(_http_profile(server, api_key_env="TEST_CHAT_KEY"), env={})
        gateway.send_chat("h", REQUEST)
        assert handler.seen[0]["auth"] is None
        gateway.close()

    def test_500_retries_then_succeeds(self, chat_server):
        server, handler = chat_server
        handler.responses.append((500, "{}"))
        handler.responses.append((200, _ok_body("eventually")))
        gateway = make_gateway(_http_profile(server, max_retries=1))
        assert gateway.send_chat("h", REQUEST).text == "eventually"
        assert len(handler.seen) == 2
        gateway.close()

    def test_429_is_retryable(self, chat_server):
        server, handler = chat_server
        handler.responses.append((429, "{}"))
        handler.responses.append((200, _ok_body("after limit")))
        gateway = make_gateway(_http_profile(server, max_retries=1))
        assert gateway.send_chat("h", REQUEST).text == "after limit"
        gateway.close()

    def test_400_rejects_without_retry(self, chat_server):
        server, handler = chat_server
        handler.responses.append((400, '{"error": "bad"}'))
        gateway = make_gateway(_http_profile(server, max_retries=2))
        with pytest.raises(RequestRejected):
            gateway.send_chat("h", REQUEST)
        assert len(handler.seen) == 1
        gateway.close()

    def test_non_json_body_is_malformed(self, chat_server):
        server, handler = chat_server
        handler.responses.append((200, "<html>oops</html>"))
        gateway = make_gateway(_http_profile(server))
        with pytest.raises(MalformedWireResponse):
            gateway.send_chat("h", REQUEST)
        gateway.close()

    def test_timeout_exhausts_as_timeout_error(self):
        # A listening socket that never responds: reads time out client-side.
        import socket

        listener = socket.socket()
        listener.bind(("127.0.0.1", 0))
        listener.listen(1)
        host, port = listener.getsockname()
        gateway = make_gateway(
            mock_profile("h", base_url=f"http://{host}:{port}", max_retries=1, timeout_ms=100.0)
        )
        try:
            with pytest.raises(ExhaustedRetries) as info:
                gateway.send_chat("h", REQUEST)
            assert info.value.attempts == 2
            assert isinstance(info.value.last_error, Timeout)
        finally:
            gateway.close()
            listener.close()

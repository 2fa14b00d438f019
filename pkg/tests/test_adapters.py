import http.server
import json
import threading

import numpy as np
import pytest

from halmine.adapters import (
    AdapterError,
    AdapterTransportError,
    Conditioning,
    DetectorAdapter,
    RemoteDetector,
    RemoteVlm,
    VlmCapabilities,
    ask_yes_no,
    detect,
    generate,
    parse_yes_no,
)
from halmine.store import content_digest, decode_image
from halmine.stubs import (
    CannedVlm,
    StubDetector,
    StubEmbedder,
    StubGenerator,
    StubLayout,
    StubPerceptual,
    StubVlm,
    image_bytes_to_vector,
    vector_to_image_bytes,
)

from conftest import make_stub_image


class TestParseYesNo:
    @pytest.mark.parametrize("text,expected", [
        ("Yes", "yes"),
        ("yes, there is one", "yes"),
        ("YES.", "yes"),
        ("No", "no"),
        ("no.", "no"),
        ("  \n Yes", "yes"),
        ("I cannot tell", "invalid"),
        ("Maybe", "invalid"),
        ("", "invalid"),
        ("42", "invalid"),
        # prefix rule: first token decides by yes/no prefix
        ("Note the cat", "no"),
        ("Yesterday it was", "yes"),
    ])
    def test_parsing(self, text, expected):
        assert parse_yes_no(text) == expected


class TestAskYesNo:
    def test_stub_yes(self, layout, leopard, bank):
        vlm = StubVlm.canonical(layout)
        ev = ask_yes_no(vlm, make_stub_image(layout, hal=1.0), leopard, bank)
        assert ev.answer == "yes"
        assert ev.p_yes > 0.9
        assert ev.prompt_text.endswith("Please answer only with yes or no.")
        assert "leopard" in ev.prompt_text

    def test_fixed_probability(self, layout, leopard, bank):
        ev = ask_yes_no(CannedVlm("Yes", p_yes=0.9), make_stub_image(layout), leopard, bank)
        assert ev.answer == "yes"
        assert ev.p_yes == 0.9

    def test_invalid_reply(self, layout, leopard, bank):
        ev = ask_yes_no(CannedVlm("I cannot tell"), make_stub_image(layout), leopard, bank)
        assert ev.answer == "invalid"

    def test_answer_only_vlm_has_no_probability(self, layout, leopard, bank):
        vlm = CannedVlm("Yes")
        ev = ask_yes_no(vlm, make_stub_image(layout), leopard, bank)
        assert ev.p_yes is None
        assert ev.answer == "yes"


class ListDetector(DetectorAdapter):
    model_id = "list-detector"

    def __init__(self, scores):
        self._scores = scores

    def propose(self, image, object_name):
        return self._scores


class TestDetect:
    def test_no_proposals(self, layout, leopard):
        assert detect(ListDetector([]), make_stub_image(layout), leopard) == 0.0

    def test_max_over_proposals(self, layout, leopard):
        assert detect(ListDetector([0.03, 0.07]), make_stub_image(layout), leopard) == 0.07

    def test_score_out_of_range_rejected(self, layout, leopard):
        with pytest.raises(AdapterError):
            detect(ListDetector([1.2]), make_stub_image(layout), leopard)

    def test_stub_fires_on_planted_feature(self, layout, leopard):
        det = StubDetector.canonical(layout)
        planted = detect(det, make_stub_image(layout, obj=1.0), leopard)
        clean = detect(det, make_stub_image(layout, obj=0.0), leopard)
        assert planted > 0.9
        assert clean < 0.05


class TestGenerator:
    def test_zero_conditioning_is_midgray(self, layout):
        s, p = layout.semantic_dim, layout.perceptual_dim
        gen = StubGenerator(
            np.zeros((layout.image_dim, 4 + s)), np.full(layout.image_dim, 0.5), 4, (s,)
        )
        data = generate(gen, Conditioning(np.zeros(4), [np.zeros(s)]))
        assert np.allclose(image_bytes_to_vector(data), 0.5)

    def test_deterministic_generation(self, layout):
        gen = StubGenerator.canonical(layout)
        rng = np.random.default_rng(0)
        c = Conditioning(rng.normal(size=gen.latent_dim), [rng.normal(size=d) for d in gen.text_dims])
        h1 = content_digest(decode_image(generate(gen, c)))
        h2 = content_digest(decode_image(generate(gen, c)))
        assert h1 == h2

    def test_perturbed_latent_changes_content(self, layout):
        gen = StubGenerator.canonical(layout)
        rng = np.random.default_rng(0)
        c = Conditioning(rng.normal(size=gen.latent_dim), [rng.normal(size=d) for d in gen.text_dims])
        c2 = c.copy()
        c2.latent[0] += 0.5
        h1 = content_digest(decode_image(generate(gen, c)))
        h2 = content_digest(decode_image(generate(gen, c2)))
        assert h1 != h2

    def test_dimension_mismatch_rejected(self, layout):
        gen = StubGenerator.canonical(layout)
        with pytest.raises(AdapterError):
            generate(gen, Conditioning(np.zeros(gen.latent_dim + 1), [np.zeros(d) for d in gen.text_dims]))
        with pytest.raises(AdapterError):
            generate(gen, Conditioning(np.zeros(gen.latent_dim), [np.zeros(3)]))


class TestEmbeddersAndCapabilities:
    def test_text_embedding_unit_norm_and_deterministic(self, layout):
        emb = StubEmbedder(layout)
        a = emb.embed_text("a music sheet")
        b = emb.embed_text("a music sheet")
        assert np.allclose(a, b)
        assert abs(np.linalg.norm(a) - 1.0) < 1e-12

    def test_image_embedding_unit_norm(self, layout):
        emb = StubEmbedder(layout)
        v = emb.embed_image(make_stub_image(layout, seed=9))
        assert abs(np.linalg.norm(v) - 1.0) < 1e-12
        assert v.size == layout.semantic_dim

    def test_perceptual_similarity_symmetric_bounded(self, layout):
        per = StubPerceptual(layout)
        a = per.embed(make_stub_image(layout, seed=1))
        b = per.embed(make_stub_image(layout, seed=2))
        assert per.similarity(a, b) == per.similarity(b, a)
        assert 0.0 <= per.similarity(a, b) <= 1.0
        assert per.similarity(a, a) == pytest.approx(1.0)

    def test_differentiable_requires_probability(self):
        with pytest.raises(AdapterError):
            VlmCapabilities(yes_probability=False, differentiable=True)

    def test_codec_roundtrip_exact(self, layout):
        x = np.random.default_rng(3).normal(size=layout.image_dim).astype(np.float32)
        back = image_bytes_to_vector(vector_to_image_bytes(x))
        assert np.array_equal(back, x.astype(np.float64))


class _Handler(http.server.BaseHTTPRequestHandler):
    def do_POST(self):
        n = int(self.headers["Content-Length"])
        payload = json.loads(self.rfile.read(n))
        if self.path == "/vlm":
            out = {"text": "Yes", "p_yes": 0.8, "p_yes_raw": 0.6}
        else:
            out = {"scores": [0.02, 0.05]}
        out["echo_question"] = payload.get("question")
        body = json.dumps(out).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


@pytest.fixture
def local_server():
    server = http.server.HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}"
    server.shutdown()


class TestRemoteAdapters:
    def test_remote_vlm_roundtrip(self, local_server, layout, leopard, bank):
        vlm = RemoteVlm("remote-vlm", f"{local_server}/vlm")
        ev = ask_yes_no(vlm, make_stub_image(layout), leopard, bank)
        assert ev.answer == "yes"
        assert ev.p_yes == 0.8
        assert ev.p_yes_raw == 0.6

    def test_remote_detector_roundtrip(self, local_server, layout, leopard):
        det = RemoteDetector("remote-det", f"{local_server}/det")
        assert detect(det, make_stub_image(layout), leopard) == 0.05

    def test_transport_failure_is_retryable_error(self, layout, leopard, bank):
        vlm = RemoteVlm("remote-vlm", "http://127.0.0.1:1/vlm", timeout=0.2)
        with pytest.raises(AdapterTransportError):
            ask_yes_no(vlm, make_stub_image(layout), leopard, bank)

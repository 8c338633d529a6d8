import pytest
import torch

from camgen.data import Vocabulary
from camgen.model import CamTransformer, ModelConfig
from camgen.synthetic import SyntheticSpec, generate_synthetic
from camgen.viz import capture, load_records, render


@pytest.fixture(scope="module")
def setup():
    spec = SyntheticSpec(num_examples=8, num_test_examples=2, num_refs=3,
                         vocab_size=60, seed=21)
    train, test = generate_synthetic(spec)
    vocab = Vocabulary.build(train, max_size=spec.vocab_size)
    torch.manual_seed(0)
    model = CamTransformer(ModelConfig.desk(vocab_size=len(vocab), num_cams=1))
    model.eval()
    return model, vocab, test[0]


def _records(setup, positions=(0, 2, 5), **kwargs):
    model, vocab, ex = setup
    generated = list(ex.target)[:10]
    return capture(model, vocab, ex, generated, list(positions), **kwargs)


class TestCapture:
    def test_weights_normalized(self, setup):
        for rec in _records(setup):
            assert sum(rec.weights) == pytest.approx(1.0, abs=1e-5)
            assert all(w >= 0 for w in rec.weights)

    def test_boundary_count_matches_documents(self, setup):
        model, vocab, ex = setup
        recs = _records(setup)
        assert len(recs[0].doc_boundaries) == len(ex.references) - 1

    def test_position_out_of_range_rejected(self, setup):
        with pytest.raises(ValueError):
            _records(setup, positions=(99,))
        with pytest.raises(ValueError):
            _records(setup, positions=(-1,))

    def test_deterministic(self, setup):
        a = _records(setup)
        b = _records(setup)
        for ra, rb in zip(a, b):
            assert ra.weights == rb.weights

    def test_per_head_rows_average_to_mean(self, setup):
        recs = _records(setup, positions=(1,), per_head=True)
        rec = recs[0]
        heads = rec.per_head
        mean = [sum(col) / len(heads) for col in zip(*heads)]
        total = sum(mean)
        renorm = [m / total for m in mean]
        for a, b in zip(renorm, rec.weights):
            assert a == pytest.approx(b, abs=1e-6)

    def test_negative_layer_resolved(self, setup):
        model, _, _ = setup
        rec = _records(setup, positions=(0,), layer=-1)[0]
        assert rec.layer == model.config.num_decoder_layers - 1


class TestRender:
    def test_round_trip_exact(self, setup, tmp_path):
        recs = _records(setup)
        image_path, data_path = render(recs, tmp_path / "attn")
        payload = load_records(data_path)
        assert len(payload["records"]) == len(recs)
        for rec, saved in zip(recs, payload["records"]):
            assert saved["weights"] == rec.weights
            assert saved["doc_boundaries"] == rec.doc_boundaries
            assert saved["position"] == rec.position

    def test_top5_order(self, setup, tmp_path):
        recs = _records(setup)
        _, data_path = render(recs, tmp_path / "attn")
        for saved in load_records(data_path)["records"]:
            w = saved["weights"]
            top5 = saved["top5_indices"]
            assert len(top5) == min(5, len(w))
            for earlier, later in zip(top5, top5[1:]):
                assert (w[earlier], -earlier) >= (w[later], -later)
            floor = max(w[i] for i in top5[-1:])
            assert all(w[i] <= floor or i in top5 for i in range(len(w)))

    def test_image_written(self, setup, tmp_path):
        recs = _records(setup, positions=(0,))
        image_path, _ = render(recs, tmp_path / "attn")
        header = open(image_path, "rb").read(8)
        assert header == b"\x89PNG\r\n\x1a\n"

    def test_empty_records_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            render([], tmp_path / "attn")

    def test_bad_data_file_rejected(self, tmp_path):
        path = tmp_path / "bogus.json"
        path.write_text('{"format": "other"}')
        with pytest.raises(ValueError):
            load_records(path)

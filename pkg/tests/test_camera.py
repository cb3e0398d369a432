import numpy as np
import pytest

from app.camera import MouthFrameStream
from app.errors import CorpusError
from storage.datasets import write_mouth_stream
from storage.image_io import quantize


class TestMouthFrameStream:
    def test_reads_in_order_then_stops(self, tiny_session):
        stream = MouthFrameStream.from_frames(tiny_session.mouth)
        assert len(stream) == 6
        indices = [f.index for f in stream]
        assert indices == list(range(6))
        assert stream.read() == (False, None)
        assert stream.position == 6

    def test_rewind(self, tiny_session):
        stream = MouthFrameStream.from_frames(tiny_session.mouth)
        first = stream.read()[1]
        stream.rewind()
        assert stream.read()[1] is first

    def test_max_frames(self, tiny_session):
        stream = MouthFrameStream(frames=tiny_session.mouth, max_frames=2)
        assert len(list(stream)) == 2

    def test_directory_is_decoded_lazily(self, tmp_path, tiny_session):
        write_mouth_stream(tmp_path, tiny_session.mouth)
        stream = MouthFrameStream(tmp_path)
        (tmp_path / "mouth_0005.ppm").unlink()
        frames = [stream.read()[1] for _ in range(5)]
        np.testing.assert_array_equal(frames[3].image, quantize(tiny_session.mouth[3].image))
        with pytest.raises(CorpusError):
            stream.read()

    def test_needs_exactly_one_source(self, tmp_path, tiny_session):
        with pytest.raises(ValueError):
            MouthFrameStream()
        with pytest.raises(ValueError):
            MouthFrameStream(tmp_path, tiny_session.mouth)

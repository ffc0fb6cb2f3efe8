import torch

from isds.callbacks.tensorboard import TraceWriter


class RecordingWriter:
    def __init__(self):
        self.scalars = []
        self.closed = False

    def add_scalar(self, tag, value, step):
        self.scalars.append((tag, value, step))

    def flush(self):
        pass

    def close(self):
        self.closed = True


def test_disabled_writer_is_a_noop():
    writer = TraceWriter()
    assert not writer.enabled
    writer.on_epoch_end("msm", 0, {"objective": 1.0})
    writer.close()


def test_scalars_are_tagged_by_stage_and_restart():
    recorder = RecordingWriter()
    writer = TraceWriter(tb_writer=recorder)
    writer.on_epoch_end("final", 3, {"objective": torch.tensor(2.5), "lr": 1e-3, "note": "x"}, restart=1)
    writer.on_epoch_end("msm", 0, {"objective": -1.0})
    writer.close()
    assert recorder.scalars == [
        ("final/restart_1/objective", 2.5, 3),
        ("final/restart_1/lr", 1e-3, 3),
        ("msm/objective", -1.0, 0),
    ]
    assert recorder.closed


def test_event_files_are_written(tmp_path):
    writer = TraceWriter(log_dir=str(tmp_path))
    writer.on_epoch_end("msm", 0, {"objective": 1.0})
    writer.close()
    assert any(p.name.startswith("events.out.tfevents") for p in tmp_path.rglob("*"))

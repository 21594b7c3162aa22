import numpy as np
import pytest

from stylesearch.cli import main as cli_main


@pytest.fixture(scope="session")
def artifact_dir(tmp_path_factory):
    """A small end-to-end artifact set built through the CLI: corpus on disk,
    trained checkpoint, saved index."""
    root = tmp_path_factory.mktemp("artifacts")
    corpus_dir = root / "corpus"
    ckpt = root / "model.ckpt"
    index = root / "clips.esrx"

    assert cli_main([
        "synth", "--out", str(corpus_dir), "--num-styles", "5", "--per-style", "10",
        "--min-duration", "0.6", "--max-duration", "1.2", "--seed", "3",
    ]) == 0
    assert cli_main([
        "train", "--corpus", str(corpus_dir), "--out", str(ckpt),
        "--total-epochs", "4", "--stage1-epochs", "1", "--stage2-epochs", "1",
        "--batch-size", "8", "--d", "16", "--h-s", "24", "--h-t", "12",
        "--d-disc", "10", "--d-cls", "10", "--seed", "2",
    ]) == 0
    assert cli_main([
        "embed", "--ckpt", str(ckpt), "--corpus", str(corpus_dir),
        "--out", str(index), "--split", "all",
    ]) == 0
    return {"corpus": corpus_dir, "ckpt": ckpt, "index": index}

import time

import numpy as np
import pytest
from hypothesis import settings

from patchlm.checkpoint import save_model
from patchlm.lora import LoraConfig, params_fingerprint
from patchlm.model import ModelConfig, SequenceBuilder, decode_greedy, init_params
from patchlm.patchify import DynamicSet, Original
from patchlm.pipeline import EOS, build_sample, load_jsonl_dataset
from patchlm.synth import make_color_dataset
from patchlm.train import MixtureManifest, TrainConfig, train

settings.register_profile("patchlm", deadline=None, max_examples=50)
settings.load_profile("patchlm")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def prompt_of(tokenized):
    """Prompt sequence of a training sample: everything before the answer span."""
    seq = tokenized.sequence
    start = int(np.nonzero(tokenized.loss_mask)[0][0])
    b = SequenceBuilder()
    for pos in range(start):
        if seq.kinds[pos] == 0:
            b.add_patch(seq.patches[seq.indices[pos]])
        else:
            b.add_token(seq.token_at(pos))
    return b.build()


def decode_accuracy(params, samples, adapters=None, policy=None):
    policy = policy or Original()
    correct = 0
    for s in samples:
        ts = build_sample(s, policy)
        ids = decode_greedy(params, prompt_of(ts), max_new=4, eos_id=EOS, adapters=adapters)
        got = bytes(t for t in ids if t < 256).decode("utf-8", errors="replace")
        correct += got == s.answer
    return correct


@pytest.fixture(scope="session")
def toy_workspace(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy_data")
    manifest_path, dataset_path = make_color_dataset(out)
    return {
        "dir": out,
        "manifest_path": manifest_path,
        "dataset_path": dataset_path,
        "manifest": MixtureManifest.load(manifest_path),
        "samples": load_jsonl_dataset(dataset_path),
    }


# calibrated toy recipes: full run reaches loss<0.05 and 20/20 within 300
# steps; the LoRA run reaches 20/20 within the 2x step budget (600)
FULL_RECIPE = dict(batch_size=8, lr=3e-3, epochs=100, seed=7, checkpoint_every=50)
LORA_RECIPE = dict(batch_size=8, lr=2e-3, epochs=200, seed=7, checkpoint_every=100)


@pytest.fixture(scope="session")
def overfit_run(toy_workspace, tmp_path_factory):
    out = tmp_path_factory.mktemp("overfit_full")
    params = init_params(ModelConfig(), np.random.default_rng(0))
    cfg = TrainConfig(resolution=Original(), mode="full", **FULL_RECIPE)
    t0 = time.time()
    report = train(toy_workspace["manifest"], params, cfg, out_dir=out)
    elapsed = time.time() - t0
    final = out / "model_final.plm"
    save_model(params, final)
    return {
        "params": params,
        "report": report,
        "checkpoint": final,
        "elapsed": elapsed,
        "cfg": cfg,
        **toy_workspace,
    }


@pytest.fixture(scope="session")
def lora_run(toy_workspace, tmp_path_factory):
    out = tmp_path_factory.mktemp("overfit_lora")
    params = init_params(ModelConfig(), np.random.default_rng(0))
    fingerprint_before = params_fingerprint(params)
    cfg = TrainConfig(resolution=Original(), mode="lora", lora=LoraConfig(), **LORA_RECIPE)
    report = train(toy_workspace["manifest"], params, cfg, out_dir=out)
    return {
        "params": params,
        "report": report,
        "adapters": report.adapters,
        "fingerprint_before": fingerprint_before,
        "cfg": cfg,
        **toy_workspace,
    }


@pytest.fixture(scope="session")
def dynamic_run(toy_workspace):
    # one epoch of dynamic-resolution steps; exercises the resolution path
    params = init_params(ModelConfig(), np.random.default_rng(0))
    cfg = TrainConfig(
        batch_size=4,
        lr=1e-3,
        epochs=1,
        resolution=DynamicSet((448, 512, 768, 1024)),
        seed=11,
        checkpoint_every=100,
    )
    report = train(toy_workspace["manifest"], params, cfg, out_dir=None)
    return {"params": params, "report": report, **toy_workspace}

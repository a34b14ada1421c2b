"""HF adapter checks on tiny randomly initialised models (no downloads)."""
import numpy as np
import pytest

torch = pytest.importorskip("torch")
transformers = pytest.importorskip("transformers")
tokenizers = pytest.importorskip("tokenizers")

from conftest import central_difference, relative_error  # noqa: E402
from promptmix.backends import DecodeParams, StudentConfig, StudentTask  # noqa: E402
from promptmix.backends.hf import HFBackend, HFStudent, train_hf_student  # noqa: E402
from promptmix.backends.mock import VOCAB  # noqa: E402
from promptmix.errors import InputLengthError  # noqa: E402

pytestmark = pytest.mark.hf

WORDS = list(dict.fromkeys(["<pad>", "</s>", "<unk>"] + [w for w in VOCAB if not w.startswith("<")]
                           + ["domain:", "|", "slots:", "1.", "2.", ",", "="]))
SUFFIX, TARGET = "domain: music", "play some song"


@pytest.fixture(scope="module")
def tokenizer():
    tk = tokenizers.Tokenizer(tokenizers.models.WordLevel({w: i for i, w in enumerate(WORDS)}, unk_token="<unk>"))
    tk.pre_tokenizer = tokenizers.pre_tokenizers.WhitespaceSplit()
    return transformers.PreTrainedTokenizerFast(tokenizer_object=tk, pad_token="<pad>", eos_token="</s>",
                                                unk_token="<unk>")


def tiny_t5():
    torch.manual_seed(0)
    cfg = transformers.T5Config(vocab_size=len(WORDS), d_model=16, d_kv=4, d_ff=32, num_layers=1, num_heads=2,
                                decoder_start_token_id=0, pad_token_id=0, eos_token_id=1, dropout_rate=0.0)
    return transformers.T5ForConditionalGeneration(cfg).double()


def tiny_gpt2():
    torch.manual_seed(0)
    cfg = transformers.GPT2Config(vocab_size=len(WORDS), n_embd=16, n_layer=1, n_head=2, n_positions=128,
                                  resid_pdrop=0, embd_pdrop=0, attn_pdrop=0, pad_token_id=0, eos_token_id=1,
                                  bos_token_id=1)
    return transformers.GPT2LMHeadModel(cfg).double()


@pytest.fixture(scope="module")
def seq2seq(tokenizer):
    return HFBackend(tiny_t5(), tokenizer, "seq2seq", max_input_rows=64)


@pytest.fixture(scope="module")
def causal(tokenizer):
    return HFBackend(tiny_gpt2(), tokenizer, "causal", max_input_rows=64)


def soft_block():
    return np.random.default_rng(0).normal(size=(3, 16)) * 0.5


def test_descriptor_and_embeddings(seq2seq, causal):
    for be, kind in ((seq2seq, "seq2seq"), (causal, "causal")):
        assert be.descriptor.kind == kind and be.embed_dim == 16
        assert be.embed_tokens("play the song").shape == (3, 16)
        assert be.embed_tokens("").shape == (0, 16)


def test_causal_gradient_matches_finite_differences(causal):
    block = soft_block()
    loss, grad = causal.loss_and_input_grads(block, SUFFIX, TARGET)
    numeric = central_difference(lambda x: causal.loss_and_input_grads(x, SUFFIX, TARGET)[0], block, h=1e-6)
    assert loss > 0 and relative_error(grad, numeric) < 1e-4


def test_seq2seq_gradient_matches_finite_differences(seq2seq):
    # the T5 layer norm computes its variance in float32, which caps the
    # precision of the forward loss; a larger step keeps FD noise small
    block = soft_block()
    loss, grad = seq2seq.loss_and_input_grads(block, SUFFIX, TARGET)
    numeric = central_difference(lambda x: seq2seq.loss_and_input_grads(x, SUFFIX, TARGET)[0], block, h=1e-3)
    assert loss > 0 and relative_error(grad, numeric) < 1e-2


def test_frozen_weights(seq2seq):
    checksum = seq2seq.parameter_checksum()
    seq2seq.loss_and_input_grads(soft_block(), SUFFIX, TARGET)
    seq2seq.generate(soft_block(), SUFFIX, DecodeParams(max_new_tokens=4))
    assert seq2seq.parameter_checksum() == checksum
    assert not any(p.requires_grad for p in seq2seq.model.parameters())


def test_generate_deterministic(seq2seq, causal):
    params = DecodeParams(max_new_tokens=6, num_return_sequences=2, seed=3)
    for be in (seq2seq, causal):
        a = be.generate(soft_block(), SUFFIX, params)
        assert len(a) == 2 and all(isinstance(t, str) for t in a)
        assert a == be.generate(soft_block(), SUFFIX, params)
        assert be.generate(soft_block(), SUFFIX, DecodeParams(num_return_sequences=0)) == []


def test_input_too_long(seq2seq):
    with pytest.raises(InputLengthError):
        seq2seq.loss_and_input_grads(np.zeros((70, 16)), SUFFIX, TARGET)


def test_student_learns_target(tokenizer, tmp_path):
    tasks = [StudentTask("play the song", "music")] * 4
    cfg = StudentConfig(kind="hf-seq2seq", learning_rate=1e-2, max_epochs=30, batch_size=4)
    student = train_hf_student(tasks, cfg, (), model=tiny_t5().float(), tokenizer=tokenizer)
    losses = [h["train_loss"] for h in student.history]
    assert losses[-1] < losses[0]
    assert student.predict("play the song") == "music"
    student.save(tmp_path / "student")
    assert isinstance(student, HFStudent) and any((tmp_path / "student").iterdir())

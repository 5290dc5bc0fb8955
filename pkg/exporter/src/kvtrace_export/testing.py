"""Factories for tiny local checkpoints, so exports run without any
model hub access. Weights are randomly initialized under a fixed seed;
the byte-level tokenizer maps every UTF-8 byte to its own token."""

from __future__ import annotations


def make_tiny_rotary_model(
    path: str,
    *,
    layers: int = 2,
    attention_heads: int = 4,
    kv_heads: int = 2,
    head_dim: int = 8,
    max_positions: int = 128,
    seed: int = 7,
) -> str:
    """Write a minimal rotary-embedding causal LM checkpoint to `path`.

    Returns:
        The checkpoint path, loadable by the Auto classes.
    """
    import torch
    from tokenizers import Tokenizer
    from tokenizers.decoders import ByteLevel as ByteLevelDecoder
    from tokenizers.models import BPE
    from tokenizers.pre_tokenizers import ByteLevel
    from transformers import LlamaConfig, LlamaForCausalLM, PreTrainedTokenizerFast

    alphabet = sorted(ByteLevel.alphabet())
    vocab = {ch: i for i, ch in enumerate(alphabet)}
    tok = Tokenizer(BPE(vocab=vocab, merges=[]))
    tok.pre_tokenizer = ByteLevel(add_prefix_space=False)
    tok.decoder = ByteLevelDecoder()
    tokenizer = PreTrainedTokenizerFast(
        tokenizer_object=tok,
        bos_token="<s>",
        eos_token="</s>",
        pad_token="<pad>",
        unk_token="<unk>",
    )

    config = LlamaConfig(
        vocab_size=len(tokenizer),
        hidden_size=attention_heads * head_dim,
        intermediate_size=4 * attention_heads * head_dim,
        num_hidden_layers=layers,
        num_attention_heads=attention_heads,
        num_key_value_heads=kv_heads,
        head_dim=head_dim,
        max_position_embeddings=max_positions,
        rope_theta=10000.0,
        bos_token_id=tokenizer.bos_token_id,
        eos_token_id=tokenizer.eos_token_id,
        pad_token_id=tokenizer.pad_token_id,
    )
    torch.manual_seed(seed)
    model = LlamaForCausalLM(config)
    model.save_pretrained(path)
    tokenizer.save_pretrained(path)
    return path


def make_tiny_non_rotary_model(path: str) -> str:
    """Write just the config of a learned-position model, enough for the
    rotary-capture refusal to trigger before any weights load."""
    from transformers import GPT2Config

    GPT2Config(
        vocab_size=64, n_positions=64, n_embd=32, n_layer=2, n_head=2
    ).save_pretrained(path)
    return path

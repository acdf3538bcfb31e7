"""Text encoding: two fully independent word-embedding + Bi-LSTM stacks.

The generation-side and discrimination-side encoders never share parameters
(unless deliberately collapsed by the shared-embedding ablation), and
``partition_parameters`` produces the disjoint parameter groups that the
gradient-routing rules are asserted against.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .data import PAD_ID

GROUP_NAMES = ("gen", "disc", "emb_G", "emb_D")


class SentenceEncoder(nn.Module):
    """Word embedding table plus a single-layer bidirectional LSTM.

    Per-token features concatenate the forward and backward hidden states
    (dimension 2*hidden_size, equal to the word embedding dimension). The
    sentence embedding concatenates the two directions' endpoint states
    ('direction_ends', default) or takes the per-token features at the last
    real token ('last_step').
    """

    def __init__(self, vocab_size: int, hidden_size: int,
                 sentence_pooling: str = "direction_ends"):
        super().__init__()
        if sentence_pooling not in ("direction_ends", "last_step"):
            raise ValueError(f"unknown sentence_pooling {sentence_pooling!r}")
        self.hidden_size = hidden_size
        self.embed_dim = 2 * hidden_size
        self.sentence_dim = 2 * hidden_size
        self.sentence_pooling = sentence_pooling
        self.embedding = nn.Embedding(vocab_size, self.embed_dim, padding_idx=PAD_ID)
        self.lstm = nn.LSTM(self.embed_dim, hidden_size, num_layers=1,
                            batch_first=True, bidirectional=True)
        self.reset_parameters()

    def reset_parameters(self):
        nn.init.uniform_(self.embedding.weight, -0.1, 0.1)
        with torch.no_grad():
            self.embedding.weight[PAD_ID].zero_()
        for name, p in self.lstm.named_parameters():
            if "weight_ih" in name:
                nn.init.xavier_uniform_(p)
            elif "weight_hh" in name:
                nn.init.orthogonal_(p)
            else:
                nn.init.zeros_(p)

    def forward(self, tokens: Tensor, lengths: Tensor):
        """tokens: (N, L) int64; lengths: (N,) true lengths (>= 1).

        Returns (sentence (N, 2h), word_states (N, L, 2h)); word states at
        padded positions are zero, and outputs do not depend on pad width.
        """
        if tokens.dim() != 2:
            raise ValueError("tokens must be (N, L)")
        lengths = torch.as_tensor(lengths, dtype=torch.int64, device="cpu")
        if torch.any(lengths < 1):
            raise ValueError("every token sequence must have length >= 1")
        total_len = tokens.shape[1]
        embeds = self.embedding(tokens)
        packed = pack_padded_sequence(embeds, lengths, batch_first=True, enforce_sorted=False)
        out, (h_n, _) = self.lstm(packed)
        word_states, _ = pad_packed_sequence(out, batch_first=True, total_length=total_len)
        if self.sentence_pooling == "direction_ends":
            # h_n: (2, N, h) = each direction's state at its own final step
            sentence = torch.cat([h_n[0], h_n[1]], dim=-1)
        else:
            idx = (lengths - 1).to(tokens.device)
            sentence = word_states[torch.arange(tokens.shape[0]), idx]
        return sentence, word_states


@dataclass
class DualSentenceEmbedding:
    """The pair of sentence embeddings plus per-token hidden states."""

    s_g: Tensor
    s_d: Tensor
    word_states_g: Tensor
    word_states_d: Tensor


class DualTextEncoder(nn.Module):
    """Holds the generation-side and discrimination-side encoders.

    With ``shared=True`` (ablation) a single encoder serves both sides; it is
    assigned to the emb_D parameter group and the emb_G group is empty.
    """

    def __init__(self, vocab_size: int, hidden_size: int, shared: bool = False,
                 sentence_pooling: str = "direction_ends"):
        super().__init__()
        self.shared = shared
        if shared:
            self.encoder_shared = SentenceEncoder(vocab_size, hidden_size, sentence_pooling)
        else:
            self.encoder_g = SentenceEncoder(vocab_size, hidden_size, sentence_pooling)
            self.encoder_d = SentenceEncoder(vocab_size, hidden_size, sentence_pooling)

    @property
    def sentence_dim(self) -> int:
        return self.side("D").sentence_dim

    def side(self, which: str) -> SentenceEncoder:
        if which not in ("G", "D"):
            raise ValueError(f"side must be 'G' or 'D', got {which!r}")
        if self.shared:
            return self.encoder_shared
        return self.encoder_g if which == "G" else self.encoder_d

    def encode(self, tokens: Tensor, lengths: Tensor, side: str):
        return self.side(side)(tokens, lengths)

    def forward(self, tokens_g: Tensor, lengths_g: Tensor,
                tokens_d: Tensor, lengths_d: Tensor) -> DualSentenceEmbedding:
        s_g, w_g = self.encode(tokens_g, lengths_g, "G")
        s_d, w_d = self.encode(tokens_d, lengths_d, "D")
        return DualSentenceEmbedding(s_g=s_g, s_d=s_d, word_states_g=w_g, word_states_d=w_d)


@dataclass
class ParameterGroups:
    """Named, pairwise-disjoint parameter sets covering every trainable
    parameter of the model stack."""

    groups: dict

    def parameters(self, name: str):
        return [p for _, p in self.groups[name]]

    def named(self, name: str):
        return list(self.groups[name])

    def count(self, name: str) -> int:
        return sum(p.numel() for _, p in self.groups[name])

    def total(self) -> int:
        return sum(self.count(n) for n in self.groups)


def partition_parameters(generator: nn.Module, discriminator: nn.Module,
                         text_encoder: DualTextEncoder) -> ParameterGroups:
    """Assign every trainable parameter to exactly one of gen/disc/emb_G/emb_D.

    Raises if any parameter would be left out or claimed twice (e.g. modules
    aliasing each other's submodules).
    """
    groups = {
        "gen": [(f"gen.{n}", p) for n, p in generator.named_parameters() if p.requires_grad],
        "disc": [(f"disc.{n}", p) for n, p in discriminator.named_parameters() if p.requires_grad],
    }
    if text_encoder.shared:
        groups["emb_G"] = []
        groups["emb_D"] = [(f"emb_D.{n}", p) for n, p in
                           text_encoder.encoder_shared.named_parameters() if p.requires_grad]
    else:
        groups["emb_G"] = [(f"emb_G.{n}", p) for n, p in
                           text_encoder.encoder_g.named_parameters() if p.requires_grad]
        groups["emb_D"] = [(f"emb_D.{n}", p) for n, p in
                           text_encoder.encoder_d.named_parameters() if p.requires_grad]

    seen = {}
    dupes = []
    for gname, plist in groups.items():
        for pname, p in plist:
            if id(p) in seen:
                dupes.append(f"{pname} (already in {seen[id(p)]})")
            seen[id(p)] = pname
    if dupes:
        raise ValueError("parameters assigned to more than one group: " + ", ".join(dupes))

    all_params = {}
    for mod, prefix in ((generator, "gen"), (discriminator, "disc"), (text_encoder, "emb")):
        for n, p in mod.named_parameters():
            if p.requires_grad:
                all_params[id(p)] = f"{prefix}.{n}"
    missing = [name for pid, name in all_params.items() if pid not in seen]
    if missing:
        raise ValueError("parameters not assigned to any group: " + ", ".join(missing))
    return ParameterGroups(groups=groups)

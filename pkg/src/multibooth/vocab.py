"""Frozen word-embedding vocabulary and prompt encoder.

Stands in for a pretrained text encoder: a fixed word list with a
seeded embedding table whose row norms sit in a narrow magnitude band,
plus placeholder tokens whose embeddings are supplied per call. The
table never changes after construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .container import read_container, write_container
from .rng import Rng
from .tensor import Tensor, concat, reshape, zeros

PROMPT_LEN = 16
EMBED_DIM = 64
NORM_RANGE = (0.30, 0.40)
VOCAB_MAGIC = b"MBVC"
VOCAB_VERSION = 1

# Fixed ~200-word list: articles/prepositions, caption-template words,
# class nouns, contexts, colors/styles, and generic modifiers.
WORDS = (
    "a an the of on in at with and by near under over beside behind from to".split()
    + "photo rendering rendition image picture depiction cropped close-up".split()
    + "dark bright clean dirty good nice cool weird blurry pixelated".split()
    + ("dog cat teapot clock vase chair lamp boat robot bird fish house tree car "
       "cup bowl hat shoe ball book bottle plant toy drum bell kite fan box ring "
       "star horse rabbit turtle frog mug spoon brush").split()
    + ("beach forest mountain city snow desert garden kitchen street field river "
       "lake park room table grass sky sunset night meadow cave harbor market "
       "library studio rooftop valley island bridge plaza").split()
    + ("painting sketch watercolor cartoon sculpture mosaic poster print doodle "
       "collage").split()
    + ("red blue green yellow purple orange pink brown black white gray golden "
       "silver teal magenta cyan crimson violet amber").split()
    + ("wooden metal glass plastic striped dotted fluffy shiny matte glossy "
       "rough smooth tiny huge small large old new tall short round square "
       "curved flat soft hard light heavy circle triangle diamond cross").split()
    + ("sitting standing running floating glowing sleeping jumping resting "
       "spinning flying swimming hiding waiting playing").split()
    + ("one two three four five first second next last single double").split()
    + ("morning evening winter summer spring autumn rain fog wind storm").split()
)

# Caption templates in the CLIP-ImageNet style; "{}" is where the
# subject phrase goes. Every template word is in WORDS.
TEMPLATES = (
    "a photo of a {}",
    "a rendering of a {}",
    "a cropped photo of the {}",
    "the photo of a {}",
    "a dark photo of a {}",
    "a bright photo of the {}",
    "a close-up photo of a {}",
    "a rendition of a {}",
)

CLASS_NOUNS = ("dog", "cat", "teapot", "clock", "vase")


class VocabError(KeyError):
    """Unknown word or unbound placeholder."""

    def __str__(self):  # KeyError quotes its message; keep it readable
        return self.args[0] if self.args else ""


@dataclass
class PromptEmbedding:
    """Padded k x d prompt matrix plus a mask over the real tokens."""

    tokens: Tensor
    mask: np.ndarray
    words: tuple[str, ...] = ()

    @property
    def length(self) -> int:
        return int(self.mask.sum())


def _split(prompt) -> list[str]:
    if isinstance(prompt, str):
        return prompt.split()
    return [str(w) for w in prompt]


class Vocabulary:
    """Seeded, frozen embedding table over the fixed word list."""

    def __init__(self, seed: int = 0, dim: int = EMBED_DIM,
                 prompt_len: int = PROMPT_LEN, dtype=np.float32,
                 _table: np.ndarray | None = None):
        if len(set(WORDS)) != len(WORDS):
            raise ValueError("duplicate entries in word list")
        self.seed = int(seed)
        self.dim = int(dim)
        self.prompt_len = int(prompt_len)
        self.dtype = np.dtype(dtype)
        self.words = tuple(WORDS)
        self._index = {w: i for i, w in enumerate(self.words)}
        self.placeholder_names: set[str] = set()
        if _table is None:
            _table = self._build_table()
        self.table = _table.astype(self.dtype)
        self.table.setflags(write=False)

    def _build_table(self) -> np.ndarray:
        rng = Rng(self.seed).child("vocab")
        raw = rng.normal((len(self.words), self.dim), dtype=np.float64)
        # Rescale each row to a norm drawn strictly inside the band, so
        # float32 rounding cannot push it out.
        lo, hi = NORM_RANGE
        target = rng.uniform(lo + 0.005, hi - 0.005, (len(self.words),), dtype=np.float64)
        norms = np.linalg.norm(raw, axis=1)
        return raw * (target / norms)[:, None]

    # -- lookups -----------------------------------------------------------

    def __contains__(self, word: str) -> bool:
        return word in self._index

    def embedding(self, word: str) -> np.ndarray:
        if word not in self._index:
            raise VocabError(f"unknown word {word!r}")
        return self.table[self._index[word]].copy()

    def norm(self, word: str) -> float:
        return float(np.linalg.norm(self.embedding(word).astype(np.float64)))

    def register_placeholder(self, name: str) -> None:
        if name in self._index:
            raise ValueError(f"placeholder {name!r} collides with a vocabulary word")
        self.placeholder_names.add(name)

    # -- encoding ----------------------------------------------------------

    def encode(self, prompt, bindings: dict | None = None) -> PromptEmbedding:
        """Encode a word sequence into a padded prompt matrix.

        `bindings` maps placeholder names to their embeddings (numpy
        vectors or tracked tensors). Placeholder slots take the bound
        vector; everything else is a frozen table row; rows past the end
        are the zero pad embedding.
        """
        words = _split(prompt)
        bindings = bindings or {}
        for key in bindings:
            if key in self._index:
                raise VocabError(f"binding {key!r} collides with a vocabulary word")
        if len(words) > self.prompt_len:
            raise VocabError(
                f"prompt has {len(words)} words, max is {self.prompt_len}"
            )
        rows = []
        for w in words:
            if w in bindings:
                self.placeholder_names.add(w)
                bound = bindings[w]
                if not isinstance(bound, Tensor):
                    bound = Tensor(np.asarray(bound, dtype=self.dtype))
                if bound.shape not in ((self.dim,), (1, self.dim)):
                    raise VocabError(
                        f"binding for {w!r} has shape {bound.shape}, expected ({self.dim},)"
                    )
                rows.append(reshape(bound, (1, self.dim)))
            elif w in self._index:
                rows.append(Tensor(self.table[self._index[w]:self._index[w] + 1]))
            elif w in self.placeholder_names:
                raise VocabError(f"unbound placeholder {w!r}")
            else:
                raise VocabError(f"unknown word {w!r}")
        pad = self.prompt_len - len(words)
        if pad:
            rows.append(zeros((pad, self.dim), dtype=self.dtype))
        tokens = concat(rows, axis=0) if rows else zeros((self.prompt_len, self.dim), self.dtype)
        mask = np.zeros(self.prompt_len, dtype=bool)
        mask[:len(words)] = True
        return PromptEmbedding(tokens=tokens, mask=mask, words=tuple(words))

    def pad_prompt(self) -> PromptEmbedding:
        """The all-pad prompt used as null conditioning."""
        return self.encode([], {})

    # -- serialization -------------------------------------------------------

    def save(self, path) -> None:
        meta = {
            "seed": self.seed,
            "dim": self.dim,
            "prompt_len": self.prompt_len,
            "words": list(self.words),
        }
        write_container(path, VOCAB_MAGIC, VOCAB_VERSION, meta,
                        {"embedding_table": self.table})

    @classmethod
    def load(cls, path) -> "Vocabulary":
        _, meta, tensors = read_container(path, VOCAB_MAGIC, VOCAB_VERSION)
        if tuple(meta["words"]) != tuple(WORDS):
            raise ValueError("vocabulary file word list does not match this build")
        return cls(seed=meta["seed"], dim=meta["dim"], prompt_len=meta["prompt_len"],
                   _table=tensors["embedding_table"])

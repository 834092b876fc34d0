"""Fixed character-level vocabulary and the prompt framing used by teacher and student."""

from typing import Iterable, List, Sequence

from .errors import TokenizerError

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>")

CHARSET = "0123456789abcdefghijklmnopqrstuvwxyz .,?!:;'\"-()[]/#*+=%&_@$\n"

VOCAB = SPECIAL_TOKENS + tuple(CHARSET)
VOCAB_SIZE = len(VOCAB)

_CHAR_TO_ID = {ch: i + len(SPECIAL_TOKENS) for i, ch in enumerate(CHARSET)}


def encode(text: str, bos: bool = False, eos: bool = False) -> List[int]:
    """Lower-case `text` and map it to token ids."""
    ids = [BOS_ID] if bos else []
    for ch in text.lower():
        try:
            ids.append(_CHAR_TO_ID[ch])
        except KeyError:
            raise TokenizerError(f"character {ch!r} is not in the vocabulary") from None
    if eos:
        ids.append(EOS_ID)
    return ids


def decode(ids: Iterable[int]) -> str:
    """Map ids back to text, dropping special tokens."""
    out = []
    for i in ids:
        i = int(i)
        if i < len(SPECIAL_TOKENS):
            continue
        out.append(VOCAB[i])
    return "".join(out)


def normalize(text: str) -> str:
    """Text as the model sees it: lower-cased, unknown characters replaced by spaces."""
    return "".join(ch if ch in _CHAR_TO_ID else " " for ch in text.lower())


# Compact form of the self-response framing; the character model pays for every byte of it.
TEACHER_HEADER = "you are an honest and helpful assistant.\n# provided information\n"
TEACHER_SEPARATOR = "\n---\n"
USER_HEADER = "# user input\n"
PROMPT_END = "\n"

_TEACHER_HEADER_IDS = encode(TEACHER_HEADER)
_SEPARATOR_IDS = encode(TEACHER_SEPARATOR)
_USER_HEADER_IDS = encode(USER_HEADER)
_PROMPT_END_IDS = encode(PROMPT_END)


def teacher_prompt(context: Sequence[int], query: Sequence[int]) -> List[int]:
    """Prompt with the context in front of the query."""
    return (
        [BOS_ID]
        + _TEACHER_HEADER_IDS
        + list(context)
        + _SEPARATOR_IDS
        + _USER_HEADER_IDS
        + list(query)
        + _PROMPT_END_IDS
    )


def student_prompt(query: Sequence[int]) -> List[int]:
    """Prompt with the query only; the context must come from an adapter or prefix."""
    return [BOS_ID] + _USER_HEADER_IDS + list(query) + _PROMPT_END_IDS


def teacher_prompt_overhead(query_len: int) -> int:
    """Number of prompt tokens that are not context."""
    return len(teacher_prompt([], [0] * query_len))

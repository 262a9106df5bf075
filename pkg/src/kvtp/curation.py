"""Dataset curation: clip captions, query rewriting, segment scoring, filtering.

The pipeline for one video:

1. split its ``N`` frames into chronological clips of ``n`` frames;
2. caption every clip with a captioning model;
3. rewrite the question into a short, debiased form (at most 64 words);
4. ask a scoring model for a 0-5 relevance score per clip;
5. broadcast clip scores to frames and keep the video only if it is long
   enough and its keyframes are sparse enough.

External models are reached through :class:`LlmClient` implementations.
:class:`MockLlmClient` is deterministic and used by the tests and CLI demos.
"""

from __future__ import annotations

import ast
import hashlib
import json
import logging
import os
import re
import threading
import time
import urllib.error
import urllib.request
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from . import prompts

log = logging.getLogger(__name__)

MAX_QUERY_TOKENS = 64
DEFAULT_EVAL_SOURCES = ("videomme", "egoschema", "nextqa")

Range = tuple[int, int]


def partition_clips(frame_count: int, clip_size: int) -> list[Range]:
    """Chronological inclusive ranges of ``clip_size`` frames; the last may be shorter."""
    if frame_count < 1 or clip_size < 1:
        raise ValueError(f"need frame_count >= 1 and clip_size >= 1, got {frame_count}, {clip_size}")
    return [(s, min(s + clip_size, frame_count) - 1) for s in range(0, frame_count, clip_size)]


def range_key(r: Range) -> str:
    return f"[{r[0]}, {r[1]}]"


_RANGE_KEY = re.compile(r"^\s*\[\s*(\d+)\s*,\s*(\d+)\s*\]\s*$")


def parse_range_key(key: str) -> Range:
    m = _RANGE_KEY.match(key)
    if not m:
        raise ValueError(f"bad range key {key!r}")
    return int(m.group(1)), int(m.group(2))


# -- score strings -----------------------------------------------------------


class ScoreParseError(ValueError):
    def __init__(self, message: str, offset: int, text: str):
        super().__init__(f"{message} at byte {offset}")
        self.offset = offset
        self.text = text


class ScoreClampWarning(UserWarning):
    pass


class _Scanner:
    _WS = re.compile(r"\s*")
    _INT = re.compile(r"[+-]?\d+")

    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def error(self, message: str) -> ScoreParseError:
        return ScoreParseError(message, len(self.text[: self.pos].encode("utf-8")), self.text)

    def ws(self) -> None:
        self.pos = self._WS.match(self.text, self.pos).end()

    def peek(self) -> str:
        return self.text[self.pos : self.pos + 1]

    def expect(self, ch: str) -> None:
        self.ws()
        if self.peek() != ch:
            found = self.peek() or "end of input"
            raise self.error(f"expected {ch!r}, found {found!r}")
        self.pos += 1

    def accept(self, ch: str) -> bool:
        self.ws()
        if self.peek() == ch:
            self.pos += 1
            return True
        return False

    def integer(self) -> int:
        self.ws()
        m = self._INT.match(self.text, self.pos)
        if not m:
            raise self.error("expected an integer")
        self.pos = m.end()
        return int(m.group())


def parse_score_string(text: str) -> dict[Range, int]:
    """Parse a reply such as ``{[0,6]:3,[7,20]:5}`` into ``{(0, 6): 3, (7, 20): 5}``.

    Whitespace is allowed around every token, keys may be quoted, a trailing
    comma and doubled outer braces are accepted. Scores outside ``[0, 5]`` are
    clamped with a :class:`ScoreClampWarning`.
    """
    sc = _Scanner(text)
    sc.expect("{")
    doubled = sc.accept("{")
    out: dict[Range, int] = {}
    sc.ws()
    while sc.peek() != "}":
        entry_pos = sc.pos
        quote = ""
        sc.ws()
        if sc.peek() in ("'", '"'):
            quote = sc.peek()
            sc.pos += 1
        sc.expect("[")
        start = sc.integer()
        sc.expect(",")
        end = sc.integer()
        sc.expect("]")
        if quote:
            sc.expect(quote)
        if start < 0 or end < start:
            sc.pos = entry_pos
            raise sc.error(f"invalid frame range [{start}, {end}]")
        sc.expect(":")
        score = sc.integer()
        if (start, end) in out:
            sc.pos = entry_pos
            raise sc.error(f"duplicate range [{start}, {end}]")
        if not 0 <= score <= 5:
            clamped = min(max(score, 0), 5)
            warnings.warn(f"score {score} for [{start},{end}] clamped to {clamped}", ScoreClampWarning, stacklevel=2)
            score = clamped
        out[(start, end)] = score
        if not sc.accept(","):
            break
        sc.ws()
    sc.expect("}")
    if doubled:
        sc.expect("}")
    sc.ws()
    if sc.pos != len(text):
        raise sc.error("unexpected trailing text")
    return out


def format_score_string(scores: dict[Range, int], compact: bool = False) -> str:
    """Inverse of :func:`parse_score_string`.

    The default style is ``{[24,29]: 4, [30,35]: 1}``; ``compact=True`` gives
    ``{[0,6]:3,[7,20]:5}``.
    """
    sep, colon = (",", ":") if compact else (", ", ": ")
    body = sep.join(f"[{a},{b}]{colon}{int(s)}" for (a, b), s in sorted(scores.items()))
    return "{" + body + "}"


def broadcast_scores(segments: dict[Range, int], partition: Sequence[Range], frame_count: int) -> np.ndarray:
    """Per-frame scores: members of a scored clip get its score, everything else 0."""
    known = set(map(tuple, partition))
    out = np.zeros(frame_count)
    for (start, end), score in segments.items():
        if (start, end) not in known:
            raise ValueError(f"segment [{start}, {end}] is not a clip of the partition")
        if end >= frame_count:
            raise ValueError(f"segment [{start}, {end}] exceeds {frame_count} frames")
        out[start : end + 1] = score
    return out


# -- LLM clients -------------------------------------------------------------


class ClientError(RuntimeError):
    pass


@dataclass(frozen=True)
class RetryPolicy:
    attempts: int = 3
    backoff: float = 0.5  # seconds, doubled after every failure


class LlmClient(Protocol):
    retry: RetryPolicy

    def complete(self, messages: list[dict]) -> str: ...


def chat_body(model: str, messages: list[dict]) -> dict:
    return {"model": model, "messages": messages}


@dataclass
class HttpChatClient:
    """Chat-completion client over plain HTTP.

    Reads ``KVTP_LLM_ENDPOINT`` and ``KVTP_LLM_API_KEY`` unless given explicitly.
    """

    model: str = "gpt-4o"
    endpoint: str | None = None
    api_key: str | None = None
    timeout: float = 60.0
    retry: RetryPolicy = field(default_factory=RetryPolicy)

    def __post_init__(self):
        self.endpoint = self.endpoint or os.environ.get("KVTP_LLM_ENDPOINT")
        self.api_key = self.api_key or os.environ.get("KVTP_LLM_API_KEY")
        if not self.endpoint:
            raise ClientError("no endpoint configured (set KVTP_LLM_ENDPOINT)")

    def request(self, messages: list[dict]) -> urllib.request.Request:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        data = json.dumps(chat_body(self.model, messages)).encode("utf-8")
        return urllib.request.Request(self.endpoint, data=data, headers=headers, method="POST")

    @staticmethod
    def extract_content(payload: dict) -> str:
        try:
            return payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise ClientError(f"unexpected response shape: {str(payload)[:200]}") from None

    def complete(self, messages: list[dict]) -> str:
        try:
            with urllib.request.urlopen(self.request(messages), timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, TimeoutError, json.JSONDecodeError) as exc:
            raise ClientError(str(exc)) from exc
        return self.extract_content(payload)


_BRACKETED = re.compile(r"\[\s*(\d+)\s*,\s*(\d+)\s*\]")


def _digest(*parts: str) -> int:
    h = hashlib.sha256("\x1f".join(parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little")


class MockLlmClient:
    """Deterministic stand-in for the captioner, scorer and query rewriter.

    * caption requests return ``mock-caption-<start>-<end>``;
    * rewrite requests echo the question;
    * scoring requests give one hash-chosen clip a 5 and the others 0-2.

    ``handler`` overrides all of this. ``fail_times`` makes the first calls
    raise :class:`ClientError`. The client tracks how many calls run at once.
    """

    def __init__(self, handler: Callable[[list[dict]], str] | None = None, *, fail_times: int = 0,
                 delay: float = 0.0, retry: RetryPolicy = RetryPolicy(attempts=3, backoff=0.0)):
        self.handler = handler
        self.fail_times = fail_times
        self.delay = delay
        self.retry = retry
        self.calls = 0
        self.in_flight = 0
        self.max_in_flight = 0
        self._lock = threading.Lock()

    def complete(self, messages: list[dict]) -> str:
        with self._lock:
            self.calls += 1
            self.in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)
            fail = self.calls <= self.fail_times
        try:
            if self.delay:
                time.sleep(self.delay)
            if fail:
                raise ClientError("mock failure")
            if self.handler is not None:
                return self.handler(messages)
            return self._default(messages)
        finally:
            with self._lock:
                self.in_flight -= 1

    @staticmethod
    def _default(messages: list[dict]) -> str:
        system = messages[0]["content"]
        user = messages[-1]["content"]
        if system == prompts.CAPTION_SYSTEM_PROMPT:
            m = _BRACKETED.search(user)
            return f"mock-caption-{m.group(1)}-{m.group(2)}"
        if system.startswith(prompts.DEBIAS_SYSTEM_PROMPT[:40]):
            return user
        ranges = [(int(a), int(b)) for a, b in _BRACKETED.findall(user.split("Question:")[0])]
        if not ranges:
            return "{}"
        question = user.split("Question:")[-1].strip()
        key = _digest(question) % len(ranges)
        scores = {r: 5 if i == key else _digest(question, str(r)) % 3 for i, r in enumerate(ranges)}
        return format_score_string(scores, compact=True)


class ScoreReplyError(ClientError):
    def __init__(self, reply, cause):
        super().__init__(f"unparseable reply {reply!r}: {cause}")
        self.reply = reply


def call_with_retries(client: LlmClient, messages: list[dict], parse: Callable[[str], object] = str):
    """Call the client, retrying transport errors and unparseable replies."""
    policy = getattr(client, "retry", RetryPolicy())
    last: Exception | None = None
    reply = None
    for attempt in range(max(policy.attempts, 1)):
        if attempt and policy.backoff:
            time.sleep(policy.backoff * 2 ** (attempt - 1))
        try:
            reply = client.complete(messages)
            return parse(reply)
        except (ClientError, ValueError) as exc:
            last = exc
            log.warning("client call failed (attempt %d/%d): %s", attempt + 1, policy.attempts, exc)
    if isinstance(last, ValueError):
        raise ScoreReplyError(reply, last)
    raise ClientError(f"gave up after {policy.attempts} attempts: {last}")


@dataclass
class CaptionResult:
    captions: dict[Range, str]
    failed: dict[Range, str]

    @property
    def complete(self) -> bool:
        return not self.failed


def caption_clips(client: LlmClient, ranges: Sequence[Range], frame_refs: Sequence[str] | None = None,
                  concurrency: int = 4) -> CaptionResult:
    """Caption every clip; failed clips are reported instead of aborting the video."""
    def one(r: Range):
        refs = frame_refs[r[0] : r[1] + 1] if frame_refs is not None else []
        user = f"Clip frames {range_key(r)}\n" + "\n".join(str(x) for x in refs)
        messages = [
            {"role": "system", "content": prompts.CAPTION_SYSTEM_PROMPT},
            {"role": "user", "content": user.rstrip()},
        ]
        try:
            return r, call_with_retries(client, messages), None
        except ClientError as exc:
            return r, None, str(exc)

    captions: dict[Range, str] = {}
    failed: dict[Range, str] = {}
    if not ranges:
        return CaptionResult(captions, failed)
    with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
        results = list(pool.map(one, ranges))  # map keeps input order
    for r, text, err in results:
        if err is None:
            captions[r] = text
        else:
            failed[r] = err
    return CaptionResult(captions, failed)


def truncate_tokens(text: str, limit: int = MAX_QUERY_TOKENS) -> tuple[str, bool]:
    tokens = text.split()
    if len(tokens) <= limit:
        return text.strip(), False
    return " ".join(tokens[:limit]), True


@dataclass
class DebiasResult:
    text: str
    flagged: bool


def debias_query(client: LlmClient, question: str, max_tokens: int = MAX_QUERY_TOKENS) -> DebiasResult:
    if not question.strip():
        raise ValueError("question must be nonempty")
    messages = [
        {"role": "system", "content": prompts.DEBIAS_SYSTEM_PROMPT.format(max_tokens=max_tokens)},
        {"role": "user", "content": question},
    ]
    try:
        reply = call_with_retries(client, messages)
    except ClientError as exc:
        log.warning("query rewrite failed, truncating the original: %s", exc)
        text, _ = truncate_tokens(question, max_tokens)
        return DebiasResult(text, True)
    text, truncated = truncate_tokens(reply, max_tokens)
    if not text:
        text, _ = truncate_tokens(question, max_tokens)
        truncated = True
    return DebiasResult(text, truncated)


def scoring_messages(captions: dict[Range, str], question: str) -> list[dict]:
    segments = "\n".join(f"{range_key(r)}: {text}" for r, text in sorted(captions.items()))
    return [
        {"role": "system", "content": prompts.SCORING_SYSTEM_PROMPT},
        {"role": "user", "content": f"Segments:\n{segments}\nQuestion: {question}"},
    ]


def score_segments(client: LlmClient, captions: dict[Range, str], question: str) -> dict[Range, int]:
    if not captions:
        raise ValueError("need at least one caption to score")
    return call_with_retries(client, scoring_messages(captions, question), parse_score_string)


# -- records -----------------------------------------------------------------

_CAPTION_KEY = re.compile(r"""(['"])\[\s*(\d+)\s*,\s*(\d+)\s*\]\1\s*:\s*(['"])""")


def parse_caption_map(text: str) -> dict[str, str]:
    """Parse a caption map stored as a string, e.g. ``"{'[0, 7]': '...', ...}"``.

    Tries a Python literal first. Hand-written dumps often carry unescaped
    apostrophes inside single-quoted captions, so the fallback splits on the
    range keys and takes each value up to the last matching quote before the
    next key.
    """
    body = text.strip()
    try:
        value = ast.literal_eval(body)
        if isinstance(value, dict):
            return {str(k): str(v) for k, v in value.items()}
    except (ValueError, SyntaxError):
        pass
    if not (body.startswith("{") and body.endswith("}")):
        raise ValueError("caption map must be enclosed in braces")
    keys = list(_CAPTION_KEY.finditer(body))
    if not keys and body[1:-1].strip():
        raise ValueError("no '[start, end]' keys in caption map")
    out: dict[str, str] = {}
    for i, m in enumerate(keys):
        stop = keys[i + 1].start() if i + 1 < len(keys) else len(body) - 1
        quote = m.group(4)
        end = body.rfind(quote, m.end(), stop)
        if end < 0:
            raise ValueError(f"unterminated caption for [{m.group(2)}, {m.group(3)}]")
        rest = body[end + 1 : stop].strip()
        if rest not in ("", ","):
            raise ValueError(f"unexpected text after caption for [{m.group(2)}, {m.group(3)}]: {rest[:20]!r}")
        key = f"[{m.group(2)}, {m.group(3)}]"
        if key in out:
            raise ValueError(f"duplicate caption key {key}")
        out[key] = body[m.end() : end]
    return out



@dataclass
class DatasetRecord:
    path: str
    question: str
    debiased_question: str
    captions: dict[Range, str]
    relevance_score: dict[Range, int]

    def __post_init__(self):
        if len(self.debiased_question.split()) > MAX_QUERY_TOKENS:
            raise ValueError(f"debiased question exceeds {MAX_QUERY_TOKENS} tokens")

    @property
    def partition(self) -> list[Range]:
        return sorted(self.captions)

    def frame_count(self) -> int | None:
        """Frames covered by the caption partition, or ``None`` if it does not tile ``[0, N-1]``."""
        ranges = self.partition
        if not ranges or ranges[0][0] != 0:
            return None
        for (_, end), (start, _) in zip(ranges, ranges[1:]):
            if start != end + 1:
                return None
        return ranges[-1][1] + 1

    def to_dict(self) -> dict:
        return {
            "path": self.path,
            "question": self.question,
            "debiased_question": self.debiased_question,
            "captions": {range_key(r): t for r, t in sorted(self.captions.items())},
            "relevance_score": format_score_string(self.relevance_score),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=4, ensure_ascii=False) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetRecord":
        captions = d.get("captions", {})
        if isinstance(captions, str):
            captions = parse_caption_map(captions)
        scores = d.get("relevance_score", "{}")
        if isinstance(scores, dict):
            scores = "{" + ",".join(f"{k}:{v}" for k, v in scores.items()) + "}"
        return cls(
            path=d["path"],
            question=d["question"],
            debiased_question=d.get("debiased_question", ""),
            captions={parse_range_key(k): v for k, v in captions.items()},
            relevance_score=parse_score_string(scores),
        )

    @classmethod
    def from_json(cls, text: str) -> "DatasetRecord":
        # strict=False admits raw newlines inside strings, as in hand-edited dumps
        return cls.from_dict(json.loads(text, strict=False))

    @classmethod
    def load(cls, path) -> "DatasetRecord":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")


@dataclass
class VideoItem:
    """Raw input to the annotation pipeline."""

    path: str
    question: str
    frame_count: int
    frame_refs: list[str] | None = None


@dataclass
class AnnotationResult:
    record: DatasetRecord
    complete: bool
    query_flagged: bool
    caption_errors: dict[Range, str] = field(default_factory=dict)


def annotate_video(client: LlmClient, item: VideoItem, clip_size: int = 8, concurrency: int = 4) -> AnnotationResult:
    ranges = partition_clips(item.frame_count, clip_size)
    caps = caption_clips(client, ranges, item.frame_refs, concurrency)
    debiased = debias_query(client, item.question)
    scores = score_segments(client, caps.captions, debiased.text) if caps.captions else {}
    record = DatasetRecord(item.path, item.question, debiased.text, caps.captions, scores)
    return AnnotationResult(record, caps.complete, debiased.flagged, caps.failed)


# -- filtering and manifests -------------------------------------------------


@dataclass(frozen=True)
class CurationConfig:
    alpha: float = 0.2
    beta: float = 1.5
    temperature: float = 1.0
    clip_size: int = 8
    min_frames: int = 64
    eval_sources: tuple[str, ...] = DEFAULT_EVAL_SOURCES


def _norm_source(text: str) -> str:
    return re.sub(r"[^a-z0-9]", "", text.lower())


def is_eval_source(path: str, eval_sources: Iterable[str]) -> bool:
    p = _norm_source(path)
    return any(_norm_source(s) in p for s in eval_sources)


def record_frame_scores(record: DatasetRecord) -> np.ndarray:
    n = record.frame_count()
    if n is None:
        raise ValueError("captions do not tile a contiguous frame range")
    return broadcast_scores(record.relevance_score, record.partition, n)


def keyframe_sparsity(frame_scores, config: CurationConfig):
    from .allocator import AllocationConfig, sparsity

    return sparsity(
        frame_scores,
        AllocationConfig(alpha=config.alpha, temperature=config.temperature),
        beta=config.beta,
        min_frames=config.min_frames,
    )


@dataclass
class ManifestEntry:
    path: str
    sparsity: float


@dataclass
class CurationResult:
    eval: list[ManifestEntry] = field(default_factory=list)
    train: list[ManifestEntry] = field(default_factory=list)
    excluded: list[tuple[str, str]] = field(default_factory=list)  # (path, reason)

    @property
    def kept_paths(self) -> set[str]:
        return {e.path for e in self.eval} | {e.path for e in self.train}


def curate(records: Iterable[tuple[str, DatasetRecord | None]], config: CurationConfig = CurationConfig()) -> CurationResult:
    """Filter records by length and keyframe sparsity and split them by source.

    ``records`` yields ``(file_path, record)``; a ``None`` record is skipped as
    missing input.
    """
    result = CurationResult()
    for path, record in records:
        if record is None:
            result.excluded.append((path, "missing record"))
            log.info("skip %s: missing record", path)
            continue
        try:
            scores = record_frame_scores(record)
        except ValueError as exc:
            result.excluded.append((path, str(exc)))
            log.info("skip %s: %s", path, exc)
            continue
        rep = keyframe_sparsity(scores, config)
        if not rep.passes_length:
            result.excluded.append((path, "not long enough"))
            continue
        if not rep.passes_sparsity:
            result.excluded.append((path, "not sparse enough"))
            continue
        entry = ManifestEntry(path, rep.sparsity)
        (result.eval if is_eval_source(record.path, config.eval_sources) else result.train).append(entry)
    return result


def format_manifest(entries: Sequence[ManifestEntry]) -> str:
    return "".join(f"{e.path}\t{e.sparsity:.6f}\n" for e in entries)


def read_manifest(path) -> list[ManifestEntry]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            p, s = line.rsplit("\t", 1)
            out.append(ManifestEntry(p, float(s)))
    return out


def write_manifests(result: CurationResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.tsv").write_text(format_manifest(result.eval), encoding="utf-8")
    (out / "train.tsv").write_text(format_manifest(result.train), encoding="utf-8")
    (out / "excluded.tsv").write_text("".join(f"{p}\t{r}\n" for p, r in result.excluded), encoding="utf-8")


def record_filename(index: int, item_path: str) -> str:
    stem = re.sub(r"[^A-Za-z0-9]+", "_", Path(item_path).stem).strip("_") or "video"
    return f"{index:05d}_{stem}.json"


def run_pipeline(items: Sequence[VideoItem], client: LlmClient, config: CurationConfig, out_dir,
                 concurrency: int = 4) -> CurationResult:
    """Annotate every item, write one record file each, then filter into manifests.

    Manifest paths are relative to ``out_dir`` so a run is relocatable.
    """
    out = Path(out_dir)
    rec_dir = out / "records"
    rec_dir.mkdir(parents=True, exist_ok=True)
    annotated: list[tuple[str, DatasetRecord | None]] = []
    for i, item in enumerate(items):
        name = record_filename(i, item.path)
        file_path = f"records/{name}"
        try:
            res = annotate_video(client, item, config.clip_size, concurrency)
        except ClientError as exc:
            log.warning("annotation failed for %s: %s", item.path, exc)
            annotated.append((file_path, None))
            continue
        res.record.save(rec_dir / name)
        if not res.complete:
            log.warning("%s: %d clips without captions", item.path, len(res.caption_errors))
            annotated.append((file_path, None))
            continue
        annotated.append((file_path, res.record))
    result = curate(annotated, config)
    write_manifests(result, out)
    return result


def load_items(path) -> list[VideoItem]:
    """Read newline-delimited JSON objects with ``path``, ``question``, ``frame_count``."""
    items = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        d = json.loads(line)
        try:
            items.append(VideoItem(d["path"], d["question"], int(d["frame_count"]), d.get("frame_refs")))
        except KeyError as exc:
            raise ValueError(f"{path}:{lineno}: missing field {exc}") from None
    return items


"""Generation quality metrics: BLEU, ROUGE-L, CIDEr, METEOR, diversity.

Similarity metrics return raw scores in [0, 1] (CIDEr in [0, 10]); the
report serializer scales to the conventional 0-100 display range.  All
metrics case-fold and tokenize with the dataset tokenizer, so uniqueness
and n-gram boundaries agree with the training pipeline.  The METEOR here
is the exact-match unigram variant: no stemming or synonym stages.
"""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field

from .data import tokenize


@dataclass
class GenerationRecord:
    image_id: str
    category: int
    question: str
    references: list = field(default_factory=list)


def write_records(path, records):
    """Line-delimited JSON, one generation record per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({
                "image_id": r.image_id,
                "category": r.category,
                "question": r.question,
                "references": list(r.references),
            }, sort_keys=True))
            fh.write("\n")


def read_records(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            records.append(GenerationRecord(
                image_id=str(obj["image_id"]),
                category=int(obj["category"]),
                question=obj["question"],
                references=list(obj.get("references", [])),
            ))
    return records


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_n(candidate, references, n):
    """Clipped n-gram precision geometric mean with brevity penalty."""
    if not 1 <= n <= 4:
        raise ValueError("BLEU order must be in [1, 4]")
    cand = tokenize(candidate)
    refs = [tokenize(r) for r in references if tokenize(r)]
    if not cand or not refs:
        return 0.0
    log_precisions = []
    for k in range(1, n + 1):
        cand_grams = _ngrams(cand, k)
        total = sum(cand_grams.values())
        if total == 0:
            return 0.0
        clipped = 0
        for gram, count in cand_grams.items():
            best = max(_ngrams(r, k).get(gram, 0) for r in refs)
            clipped += min(count, best)
        if clipped == 0:
            return 0.0
        log_precisions.append(math.log(clipped / total))
    c = len(cand)
    r = min((len(ref) for ref in refs), key=lambda L: (abs(L - c), L))
    brevity = 1.0 if c >= r else math.exp(1.0 - r / c)
    return brevity * math.exp(sum(log_precisions) / n)


def _lcs_length(a, b):
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, references, beta=1.2):
    """Longest-common-subsequence F-measure, max over references."""
    cand = tokenize(candidate)
    refs = [tokenize(r) for r in references if tokenize(r)]
    if not refs:
        raise ValueError("ROUGE-L needs at least one nonempty reference")
    if not cand:
        return 0.0
    best = 0.0
    for ref in refs:
        lcs = _lcs_length(cand, ref)
        if lcs == 0:
            continue
        precision = lcs / len(cand)
        recall = lcs / len(ref)
        f = (1 + beta ** 2) * precision * recall / (recall + beta ** 2 * precision)
        best = max(best, f)
    return best


def cider(corpus, n_max=4):
    """Corpus-level TF-IDF n-gram cosine consensus, orders 1..4, scaled x10.

    Document frequency counts the corpus items whose reference set contains
    an n-gram; each candidate is scored against its own references only.
    """
    if not corpus:
        raise ValueError("CIDEr needs a nonempty corpus")
    items = [
        (tokenize(cand), [tokenize(r) for r in refs if tokenize(r)])
        for cand, refs in corpus
    ]
    doc_freq = [defaultdict(int) for _ in range(n_max)]
    for _, refs in items:
        for k in range(1, n_max + 1):
            seen = set()
            for ref in refs:
                seen.update(_ngrams(ref, k))
            for gram in seen:
                doc_freq[k - 1][gram] += 1

    n_docs = len(items)

    def tfidf(tokens, k):
        vec = {}
        for gram, count in _ngrams(tokens, k).items():
            df = doc_freq[k - 1].get(gram, 0)
            if df > 0:
                vec[gram] = count * math.log(n_docs / df)
        return vec

    def cosine(u, v):
        norm_u = math.sqrt(sum(x * x for x in u.values()))
        norm_v = math.sqrt(sum(x * x for x in v.values()))
        if norm_u == 0 or norm_v == 0:
            return 0.0
        dot = sum(x * v.get(g, 0.0) for g, x in u.items())
        return dot / (norm_u * norm_v)

    total = 0.0
    for cand, refs in items:
        if not refs:
            continue
        item_score = 0.0
        for k in range(1, n_max + 1):
            cand_vec = tfidf(cand, k)
            item_score += sum(cosine(cand_vec, tfidf(ref, k)) for ref in refs) / len(refs)
        total += item_score / n_max
    return 10.0 * total / n_docs


def _align(cand, ref):
    """Greedy in-order unigram alignment; returns (matches, chunks).

    Each candidate token pairs with an unused reference occurrence,
    preferring the position that continues the previous pair so contiguous
    phrases count as one chunk.
    """
    used = [False] * len(ref)
    positions = defaultdict(list)
    for j, w in enumerate(ref):
        positions[w].append(j)
    matches = 0
    chunks = 0
    prev_i = prev_j = None
    for i, w in enumerate(cand):
        free = [j for j in positions.get(w, ()) if not used[j]]
        if not free:
            continue
        if prev_j is not None and prev_i == i - 1 and (prev_j + 1) in free:
            j = prev_j + 1
        else:
            j = free[0]
            chunks += 1
        used[j] = True
        matches += 1
        prev_i, prev_j = i, j
    return matches, chunks


def meteor_simplified(candidate, references):
    """Exact-match METEOR: harmonic mean weighted toward recall, chunk penalty."""
    cand = tokenize(candidate)
    best = 0.0
    for reference in references:
        ref = tokenize(reference)
        if not cand or not ref:
            continue
        matches, chunks = _align(cand, ref)
        if matches == 0:
            continue
        precision = matches / len(cand)
        recall = matches / len(ref)
        f_mean = 10 * precision * recall / (recall + 9 * precision)
        penalty = 0.5 * (chunks / matches) ** 3
        best = max(best, f_mean * (1.0 - penalty))
    return best


def _canonical(text):
    return " ".join(tokenize(text))


def strength(generations):
    """Percentage of unique questions among all generated questions."""
    if not generations:
        raise ValueError("strength needs at least one generation")
    unique = {_canonical(g) for g in generations}
    return 100.0 * len(unique) / len(generations)


def inventiveness(generations, training_questions, denominator="all"):
    """Percentage of unique generated questions never seen in training.

    ``denominator`` selects what the unseen-unique count is divided by:
    "all" (every generation) or "unique" (distinct generations only).
    """
    if not generations:
        raise ValueError("inventiveness needs at least one generation")
    if denominator not in ("all", "unique"):
        raise ValueError("denominator must be 'all' or 'unique'")
    unique = {_canonical(g) for g in generations}
    seen = {_canonical(q) for q in training_questions}
    unseen = unique - seen
    base = len(generations) if denominator == "all" else len(unique)
    return 100.0 * len(unseen) / base


@dataclass
class MetricReport:
    bleu: dict
    rouge_l: float
    cider: float
    meteor: float
    strength: float
    inventiveness: float
    per_category: dict
    n_records: int
    n_scored: int  # records with at least one reference

    def as_dict(self, scaled=True):
        """Plain dict for JSON; scaled=True uses the 0-100 display range."""
        sim = (lambda v: 100.0 * v) if scaled else (lambda v: v)
        return {
            "n_records": self.n_records,
            "n_scored": self.n_scored,
            "bleu": {str(n): sim(v) for n, v in self.bleu.items()},
            "rouge_l": sim(self.rouge_l),
            "cider": 10.0 * self.cider if scaled else self.cider,
            "meteor": sim(self.meteor),
            "strength": self.strength,
            "inventiveness": self.inventiveness,
            "per_category": self.per_category,
        }

    def table(self):
        """Aligned per-category diversity table with the overall row last."""
        rows = [("category", "count", "strength", "inventiveness")]
        for name in sorted(self.per_category):
            entry = self.per_category[name]
            rows.append((
                name, str(entry["count"]),
                f"{entry['strength']:.2f}", f"{entry['inventiveness']:.2f}",
            ))
        rows.append(("overall", str(self.n_records),
                     f"{self.strength:.2f}", f"{self.inventiveness:.2f}"))
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
                 for row in rows]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines)


def evaluate(records, training_questions, category_names=None,
             inventiveness_denominator="all"):
    """Full metric suite over generation records.

    Similarity metrics average over records that carry references (CIDEr is
    corpus-level over the same subset); diversity metrics pool every record.
    """
    if not records:
        raise ValueError("cannot evaluate an empty record list")
    scored = [r for r in records if r.references]
    bleu_scores = {n: 0.0 for n in (1, 2, 3, 4)}
    rouge = meteor = 0.0
    if scored:
        for r in scored:
            for n in bleu_scores:
                bleu_scores[n] += bleu_n(r.question, r.references, n)
            rouge += rouge_l(r.question, r.references)
            meteor += meteor_simplified(r.question, r.references)
        bleu_scores = {n: v / len(scored) for n, v in bleu_scores.items()}
        rouge /= len(scored)
        meteor /= len(scored)
        cider_score = cider([(r.question, r.references) for r in scored])
    else:
        cider_score = 0.0

    generations = [r.question for r in records]
    per_category = {}
    by_cat = defaultdict(list)
    for r in records:
        by_cat[r.category].append(r.question)
    for cat, questions in sorted(by_cat.items()):
        name = category_names[cat] if category_names else str(cat)
        per_category[name] = {
            "count": len(questions),
            "strength": strength(questions),
            "inventiveness": inventiveness(
                questions, training_questions, denominator=inventiveness_denominator
            ),
        }

    return MetricReport(
        bleu=bleu_scores,
        rouge_l=rouge,
        cider=cider_score,
        meteor=meteor,
        strength=strength(generations),
        inventiveness=inventiveness(
            generations, training_questions, denominator=inventiveness_denominator
        ),
        per_category=per_category,
        n_records=len(records),
        n_scored=len(scored),
    )

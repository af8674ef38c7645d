"""Building a multi-domain corpus, reading it back, and looking at entity spans.

Run: python demos/01_corpora_and_spans.py [output_dir]
"""

import sys
import tempfile
from pathlib import Path

from hgda.corpus import corpus_stats, extract_entities, load_manifest, parse_conll
from hgda.synth import SynthConfig, write_synthetic

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp()) / "corpus"

# Four domains; the last one ("Disease") is held out as the target.
# Entity density is deliberately skewed: Drug sentences are mostly annotated,
# Species sentences rarely are.
cfg = SynthConfig(n_train=120, n_dev=30, n_test=60)
manifest_path = write_synthetic(out, cfg, seed=0)
print("wrote", manifest_path)

manifest = load_manifest(manifest_path)
print("domains:", manifest.registry.domains, "target:", manifest.registry.target_domain)
for entry, corpus in zip(manifest.entries, manifest.load_corpora()):
    st = corpus_stats(corpus)
    print(f"  {entry.domain:8s} {corpus.split:5s} {st['num_sentences']:4d} sentences, "
          f"{st['num_unique_tokens']:4d} word types, {100 * st['fraction_with_entities']:5.1f}% with entities")

# The reader is strict about IOB2 by default...
text = "Aspirin B-Drug\nlowers O\nfever O\n\nthe O\nBRCA1 I-Gene\ngene I-Gene\n"
try:
    parse_conll(text)
except Exception as e:
    print("\nstrict parse rejected the input:", type(e).__name__, "-", e)

# ...and can repair a run that starts with I- when asked.
corpus = parse_conll(text, repair=True)
for s in corpus.sentences:
    print(" ".join(f"{w}/{t}" for w, t in zip(s.tokens, s.tags)), "->", extract_entities(s.tags))

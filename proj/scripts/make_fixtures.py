#!/usr/bin/env python3
"""Generate the test fixtures used by the C++ test suites.

This is the one-time oracle run: it builds a synthetic corpus and QA dataset,
trains a byte-level BPE tokenizer (GPT-2 vocab.json/merges.txt format) and a
small GPT-2-architecture checkpoint on that corpus, then records reference
outputs (token ids, final logits, per-layer hidden states, greedy decodes)
computed with the HuggingFace reference implementations. The C++ code under
test never links against any of this; it only reads the committed files.

Run from the repository root:

    python3 scripts/make_fixtures.py --out tests/fixtures

Requires: torch, transformers, tokenizers, safetensors (CPU only).
"""

import argparse
import json
import math
import os
import random
import shutil
import sys
import tempfile

import torch
from safetensors.torch import save_file
from tokenizers import ByteLevelBPETokenizer
from transformers import GPT2Config, GPT2LMHeadModel

EOT = "<|endoftext|>"

PROMPT_HEADER = (
    "Write a high-quality answer for the given question using only the "
    "provided search results (some of which might be irrelevant)."
)

SYLLABLES_A = ["Tar", "Vel", "Os", "Quor", "Bren", "Mal", "Fen", "Dor", "Kel",
               "Rav", "Sol", "Tev", "Lor", "Mir", "Gal", "Nor", "Pel", "Zan",
               "Har", "Cor", "Jun", "Ler", "Vos", "Ter", "Bal"]
SYLLABLES_B = ["vik", "mora", "dan", "in", "holm", "grad", "lia", "mark",
               "stad", "ville", "ford", "mont", "berg", "wick", "thorpe",
               "dale", "port", "field", "crest", "haven"]
SYLLABLES_C = ["land", "onia", "avia", "istan", "ora", "esia", "ovia", "ania",
               "ia", "or", "una", "aria"]

REGIONS = ["the northern highlands", "the eastern coast", "the southern plains",
           "the western valleys", "the central basin", "the great archipelago",
           "the frozen tundra", "the river delta"]

COLORS = ["red", "blue", "green", "golden", "silver", "white", "black",
          "crimson", "violet", "amber"]

SYMBOLS = ["eagle", "lion", "star", "ship", "mountain", "tree", "sun", "wolf",
           "crown", "anchor"]

EXPORTS = ["copper", "timber", "wool", "grain", "salt", "glass", "tea",
           "marble", "silk", "amber"]

FIELDS = ["artificial intelligence", "deep learning", "quantum chemistry",
          "marine biology", "computational linguistics", "particle physics",
          "organic farming", "civil engineering", "ancient history",
          "modern architecture", "climate science", "number theory"]

PEOPLE = ["Hinton", "Moreau", "Takeda", "Lindqvist", "Okafor", "Petrov",
          "Ramirez", "Whitfield", "Nakamura", "Johansson", "Adeyemi", "Kovacs",
          "Delacroix", "Bergstrom", "Ivanova", "Castellano"]

HINTON_SENTENCE = ("Hinton is a prominent figure in the field of artificial "
                   "intelligence and deep learning.")


def make_names(rng, n, suffixes, taken):
    names = []
    while len(names) < n:
        name = rng.choice(SYLLABLES_A) + rng.choice(SYLLABLES_B if suffixes is None else suffixes)
        if suffixes is None:
            pass
        if name not in taken:
            taken.add(name)
            names.append(name)
    return names


def build_world(rng):
    taken = set()
    countries = make_names(rng, 210, SYLLABLES_C, taken)
    cities = make_names(rng, 210, None, taken)
    world = []
    for country, city in zip(countries, cities):
        world.append({
            "country": country,
            "city": city,
            "region": rng.choice(REGIONS),
            "color": rng.choice(COLORS),
            "symbol": rng.choice(SYMBOLS),
            "export": rng.choice(EXPORTS),
        })
    rng.shuffle(world)
    return world[:150], world[150:]


def doc_for(entry):
    return (f"{entry['country']} is a country in {entry['region']}. "
            f"The capital of {entry['country']} is {entry['city']}. "
            f"Its flag shows a {entry['color']} {entry['symbol']}.")


def build_qa_prompt(question, docs):
    lines = [PROMPT_HEADER]
    for i, (title, text) in enumerate(docs):
        lines.append(f"Document [{i + 1}](Title: {title}) {text}")
    lines.append(f"Question: {question}")
    lines.append("Answer:")
    return "\n".join(lines)


def variety_sentences(rng, world, n):
    out = []
    templates = [
        lambda e, f: f"{rng.choice(PEOPLE)} is a prominent figure in the field of {f[0]} and {f[1]}.",
        lambda e, f: f"{rng.choice(PEOPLE)} wrote a famous book about {f[0]}.",
        lambda e, f: f"Researchers in {e['city']} study {f[0]} at the national institute.",
        lambda e, f: f"The people of {e['country']} export {e['export']} and {rng.choice(EXPORTS)}.",
        lambda e, f: f"Every spring the city of {e['city']} holds a festival of {e['color']} lanterns.",
        lambda e, f: f"The flag of {e['country']} shows a {e['color']} {e['symbol']}.",
        lambda e, f: f"A journey from {e['city']} to {rng.choice(world)['city']} takes {rng.randint(2, 19)} days.",
        lambda e, f: f"The national museum of {e['country']} is located in {e['city']}.",
        lambda e, f: f"In {e['country']} the harvest of {e['export']} begins in the {rng.choice(['early', 'late'])} summer.",
        lambda e, f: f"Students of {f[0]} often travel to {e['city']} for the winter lectures.",
    ]
    for _ in range(n):
        e = rng.choice(world)
        fields = rng.sample(FIELDS, 2)
        # The exact held-out smoke-test combination never appears in training.
        if fields[0] == "artificial intelligence" and fields[1] == "deep learning":
            fields = [fields[1], fields[0]]
        t = rng.choice(templates)
        out.append(t(e, fields))
    return out


def fresh_entry(rng, taken):
    # novel name compositions from the same syllable pools, so the QA copy
    # task cannot be solved from memorized facts
    while True:
        country = rng.choice(SYLLABLES_A) + rng.choice(SYLLABLES_C)
        city = rng.choice(SYLLABLES_A) + rng.choice(SYLLABLES_B)
        if country != city and (country, city) not in taken:
            taken.add((country, city))
            return {
                "country": country,
                "city": city,
                "region": rng.choice(REGIONS),
                "color": rng.choice(COLORS),
                "symbol": rng.choice(SYMBOLS),
                "export": rng.choice(EXPORTS),
            }


def build_corpus(rng, train_world, eval_world):
    segments = []
    for e in train_world:
        segments.append(doc_for(e))
        segments.append(f"The capital of {e['country']} is {e['city']}. "
                        f"{e['city']} lies in {e['region']}.")
    segments.extend(variety_sentences(rng, train_world, 2600))
    # In-context QA examples teach the model to copy the answer out of the
    # gold document regardless of where it sits in the context. Most examples
    # bind fresh counterfactual (country, city) pairs so that reading the
    # documents is the only way to answer; the rest reuse true train facts.
    eval_pairs = {(e["country"], e["city"]) for e in eval_world}
    for qa_i in range(3500):
        if qa_i % 5 == 0:
            e = rng.choice(train_world)
            pool = [x for x in train_world if x is not e]
            distractors = rng.sample(pool, 4)
        else:
            taken = set(eval_pairs)
            e = fresh_entry(rng, taken)
            distractors = [fresh_entry(rng, taken) for _ in range(4)]
        k = rng.randint(1, 5)
        gold_pos = rng.randrange(k)
        docs = []
        di = 0
        for i in range(k):
            if i == gold_pos:
                docs.append((e["country"], doc_for(e)))
            else:
                d = distractors[di]
                di += 1
                docs.append((d["country"], doc_for(d)))
        prompt = build_qa_prompt(f"What is the capital of {e['country']}?", docs)
        segments.append(prompt + f" {e['city']}\n")
    rng.shuffle(segments)
    # The eval-world raw documents join the BPE training text (a tokenizer may
    # see any text); they are excluded from the LM training stream.
    bpe_extra = [doc_for(e) for e in eval_world]
    return segments, bpe_extra


def train_tokenizer(segments, bpe_extra, workdir, vocab_size):
    corpus_path = os.path.join(workdir, "bpe_corpus.txt")
    with open(corpus_path, "w", encoding="utf-8") as f:
        for s in segments + bpe_extra:
            f.write(s.replace("\n", " ") + "\n")
    tok = ByteLevelBPETokenizer()
    tok.train(files=[corpus_path], vocab_size=vocab_size, min_frequency=2,
              special_tokens=[EOT])
    tok.save_model(workdir)
    return ByteLevelBPETokenizer(os.path.join(workdir, "vocab.json"),
                                 os.path.join(workdir, "merges.txt"))


def make_stream(tok, segments, eot_id):
    ids = []
    for s in segments:
        ids.extend(tok.encode(s).ids)
        ids.append(eot_id)
    return ids


def train_model(tok, segments, eot_id, seed, max_epochs, device="cpu", resume_from=None):
    torch.manual_seed(seed)
    vocab_size = tok.get_vocab_size()
    if resume_from is not None:
        model = GPT2LMHeadModel.from_pretrained(resume_from).float().to(device)
        config = model.config
    else:
        config = GPT2Config(
            vocab_size=vocab_size,
            n_positions=512,
            n_embd=128,
            n_layer=12,
            n_head=4,
            resid_pdrop=0.0,
            embd_pdrop=0.0,
            attn_pdrop=0.0,
            layer_norm_epsilon=1e-5,
            bos_token_id=eot_id,
            eos_token_id=eot_id,
        )
        model = GPT2LMHeadModel(config).to(device)
    stream = make_stream(tok, segments, eot_id)
    chunk = 384
    n_chunks = len(stream) // chunk
    data = torch.tensor(stream[: n_chunks * chunk], dtype=torch.long).view(n_chunks, chunk)
    print(f"corpus: {len(stream)} tokens, {n_chunks} chunks of {chunk}")

    opt = torch.optim.AdamW(model.parameters(), lr=6e-4, weight_decay=0.01)
    warmup = 40
    batch = 8
    rng = random.Random(seed + 1)
    step = 0
    model.train()
    for epoch in range(max_epochs):
        order = list(range(n_chunks))
        rng.shuffle(order)
        total = 0.0
        nb = 0
        for i in range(0, n_chunks - batch + 1, batch):
            idx = order[i:i + batch]
            x = data[idx]
            out = model(input_ids=x, labels=x)
            loss = out.loss
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
            lr = 6e-4 * min(1.0, (step + 1) / warmup)
            for g in opt.param_groups:
                g["lr"] = lr
            opt.step()
            total += loss.item()
            nb += 1
            step += 1
        print(f"epoch {epoch}: loss {total / max(nb, 1):.4f} ({step} steps)")
    model.eval()
    return model, config


@torch.no_grad()
def greedy_ids(model, ids, max_new, eot_id, stop_newline_ids=None):
    ids = list(ids)
    out = []
    for _ in range(max_new):
        x = torch.tensor([ids], dtype=torch.long)
        logits = model(input_ids=x).logits[0, -1]
        nxt = int(torch.argmax(logits).item())  # argmax -> lowest index on ties
        if nxt == eot_id:
            break
        if stop_newline_ids is not None and nxt in stop_newline_ids:
            break
        ids.append(nxt)
        out.append(nxt)
    return out


@torch.no_grad()
def check_quality(model, tok, train_world, eval_world, eot_id):
    newline_ids = {i for t, i in tok.get_vocab().items()
                   if "\n" in tok.decode([i])}
    ok_cap = 0
    for e in train_world[:25]:
        ids = tok.encode(f"The capital of {e['country']} is").ids
        gen = greedy_ids(model, ids, 6, eot_id, newline_ids)
        if e["city"] in tok.decode(gen):
            ok_cap += 1
    rng = random.Random(777)
    acc = {0: 0, 2: 0}
    n_eval = 15
    for pos in acc:
        for e in eval_world[:n_eval]:
            pool = [x for x in eval_world if x is not e]
            distractors = rng.sample(pool, 2)
            docs = []
            di = 0
            for i in range(3):
                if i == pos:
                    docs.append((e["country"], doc_for(e)))
                else:
                    docs.append((distractors[di]["country"], doc_for(distractors[di])))
                    di += 1
            prompt = build_qa_prompt(f"What is the capital of {e['country']}?", docs)
            gen = greedy_ids(model, tok.encode(prompt).ids, 8, eot_id, newline_ids)
            if e["city"] in tok.decode(gen):
                acc[pos] += 1
    # counterfactual copy probe: fresh bindings, answer only in the document
    cf_rng = random.Random(4242)
    cf_ok = 0
    for _ in range(12):
        taken = set()
        e = fresh_entry(cf_rng, taken)
        d = fresh_entry(cf_rng, taken)
        docs = [(d["country"], doc_for(d)), (e["country"], doc_for(e))]
        prompt = build_qa_prompt(f"What is the capital of {e['country']}?", docs)
        gen = greedy_ids(model, tok.encode(prompt).ids, 8, eot_id, newline_ids)
        if e["city"] in tok.decode(gen):
            cf_ok += 1
    hin = tok.encode(HINTON_SENTENCE)
    toks = hin.tokens
    ids = hin.ids
    probs = {}
    for word, expect in (("figure", " in"), ("field", " of")):
        # position of the pre-token ending the word
        pos = max(i for i, t in enumerate(toks) if tok.decode([ids[i]]).endswith(word))
        logits = model(input_ids=torch.tensor([ids[: pos + 1]])).logits[0, -1]
        p = torch.softmax(logits.double(), dim=-1)
        top = int(torch.argmax(p).item())
        probs[word] = (tok.decode([top]), float(p[top]), tok.decode([top]) == expect)
    print(f"capital completions: {ok_cap}/25")
    print(f"counterfactual copy: {cf_ok}/12")
    print(f"qa accuracy k=3 pos0: {acc[0]}/{n_eval}, pos2: {acc[2]}/{n_eval}")
    print(f"hinton: {probs}")
    good = (ok_cap >= 22 and cf_ok >= 9 and acc[0] >= 9
            and probs["figure"][2] and probs["figure"][1] > 0.9
            and probs["field"][2] and probs["field"][1] > 0.9)
    return good


def save_checkpoint(model, out_model_dir, workdir):
    os.makedirs(out_model_dir, exist_ok=True)
    # Checkpoint ships as fp16 and is widened on load; the reference model used
    # for every fixture below is the same fp16-rounded set of weights.
    model_half = model.half()
    model_half.save_pretrained(out_model_dir, safe_serialization=True)
    ref = model_half.float()
    for name in ("vocab.json", "merges.txt"):
        shutil.copy(os.path.join(workdir, name), os.path.join(out_model_dir, name))
    return ref


@torch.no_grad()
def dump_parity(ref, tok, out_dir, train_world, eval_world):
    os.makedirs(out_dir, exist_ok=True)
    e = train_world[3]
    ev = eval_world[5]
    qa_prompt = build_qa_prompt(f"What is the capital of {ev['country']}?",
                                [(ev["country"], doc_for(ev))])
    prompts = [
        {"name": "hinton", "text": HINTON_SENTENCE},
        {"name": "capital", "text": f"The capital of {e['country']} is"},
        {"name": "qa_k1", "text": qa_prompt},
        {"name": "festival", "text": "Every spring the city of"},
        {"name": "mixed", "text": "Flags: 3 ships, 2 suns — café \"München\" (№7)!"},
    ]
    tensors = {}
    for i, p in enumerate(prompts):
        ids = tok.encode(p["text"]).ids
        p["ids"] = ids
        logits = ref(input_ids=torch.tensor([ids])).logits[0].float()
        tensors[f"logits_{i}"] = logits.contiguous()
    # The trace rows are the residual stream per layer: transformers applies
    # ln_f to the last output_hidden_states entry, so capture the pre-norm
    # hidden state with a hook instead.
    captured = {}
    handle = ref.transformer.ln_f.register_forward_pre_hook(
        lambda module, args: captured.__setitem__("h", args[0].detach().clone()))
    out = ref(input_ids=torch.tensor([prompts[0]["ids"]]), output_hidden_states=True)
    handle.remove()
    pre_final = captured["h"][0]
    states = torch.stack([h[0] for h in out.hidden_states[:-1]] + [pre_final], dim=0)
    tensors["hidden_0"] = states.float().contiguous()
    save_file(tensors, os.path.join(out_dir, "reference.safetensors"))
    with open(os.path.join(out_dir, "prompts.json"), "w", encoding="utf-8") as f:
        json.dump(prompts, f, indent=1, ensure_ascii=False)


def dump_tokenizer_cases(tok, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    texts = [
        "",
        "a",
        "Hello, world",
        HINTON_SENTENCE,
        "The capital of Freland is Tarvik.",
        "don't it's we're I'll you've he'd I'm",
        "spaces   between    words",
        " leading and trailing ",
        "tabs\tand\nnewlines\r\nmixed \n\n done",
        "numbers 12345 and 3.14159 end",
        "punctuation!!! ??? ... ---",
        "CamelCase snake_case kebab-case",
        "accented: café, naïve, Müller, São",
        "cyrillic: привет мир",
        "cjk: 北京 東京",
        "emoji: 👍 🚀 ok",
        "mixed 北京 café 123 !!!",
        "Question: What is the capital of Osland?\nAnswer:",
        "    ",
        "\n",
        "a b",
        "a  b",
        "a   b",
    ]
    cases = []
    for t in texts:
        enc = tok.encode(t)
        cases.append({"text": t, "ids": enc.ids})
    with open(os.path.join(out_dir, "cases.json"), "w", encoding="utf-8") as f:
        json.dump(cases, f, indent=1, ensure_ascii=False)


@torch.no_grad()
def dump_generation(ref, tok, out_dir, train_world, eval_world, eot_id):
    os.makedirs(out_dir, exist_ok=True)
    e = train_world[7]
    plain_prompt = f"The capital of {e['country']} is"
    plain_ids = tok.encode(plain_prompt).ids
    plain_gen = greedy_ids(ref, plain_ids, 8, eot_id)

    # pick an eval instance the model answers correctly, so the fixture also
    # witnesses a successful copy-from-context generation
    newline_ids = {i for t, i in tok.get_vocab().items() if "\n" in tok.decode([i])}
    ev = None
    for cand in eval_world:
        prompt = build_qa_prompt(f"What is the capital of {cand['country']}?",
                                 [(cand["country"], doc_for(cand))])
        gen = greedy_ids(ref, tok.encode(prompt).ids, 12, eot_id, newline_ids)
        if cand["city"] in tok.decode(gen):
            ev = cand
            break
    if ev is None:
        print("WARNING: no eval instance answered correctly; using the first one")
        ev = eval_world[0]
    qa_prompt = build_qa_prompt(f"What is the capital of {ev['country']}?",
                                [(ev["country"], doc_for(ev))])
    qa_ids = tok.encode(qa_prompt).ids
    qa_gen = greedy_ids(ref, qa_ids, 12, eot_id, newline_ids)
    fixture = {
        "plain": {"text": plain_prompt, "ids": plain_ids, "max_new": 8,
                  "generated": plain_gen},
        "qa": {"text": qa_prompt, "ids": qa_ids, "max_new": 12,
               "generated": qa_gen, "answer": ev["city"]},
    }
    with open(os.path.join(out_dir, "generation.json"), "w", encoding="utf-8") as f:
        json.dump(fixture, f, indent=1, ensure_ascii=False)


def dump_qa_dataset(rng, eval_world, out_path):
    with open(out_path, "w", encoding="utf-8") as f:
        for e in eval_world:
            pool = [x for x in eval_world if x is not e]
            distractors = rng.sample(pool, 19)
            ctxs = [{"title": e["country"], "text": doc_for(e), "isgold": True}]
            for d in distractors:
                ctxs.append({"title": d["country"], "text": doc_for(d),
                             "isgold": False})
            rec = {
                "question": f"What is the capital of {e['country']}?",
                "answers": [e["city"]],
                "ctxs": ctxs,
            }
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="tests/fixtures")
    ap.add_argument("--seed", type=int, default=20240817)
    ap.add_argument("--vocab-size", type=int, default=2000)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--skip-train", action="store_true",
                    help="reuse the checkpoint already in --out and only "
                         "regenerate the derived fixtures")
    ap.add_argument("--resume", action="store_true",
                    help="continue training the checkpoint already in --out "
                         "(keeps its tokenizer)")
    args = ap.parse_args()

    torch.set_num_threads(max(os.cpu_count() - 0, 1))
    rng = random.Random(args.seed)
    train_world, eval_world = build_world(rng)
    segments, bpe_extra = build_corpus(rng, train_world, eval_world)
    out = args.out

    if args.skip_train:
        model_dir = os.path.join(out, "model")
        tok = ByteLevelBPETokenizer(os.path.join(model_dir, "vocab.json"),
                                    os.path.join(model_dir, "merges.txt"))
        eot_id = tok.get_vocab()[EOT]
        ref = GPT2LMHeadModel.from_pretrained(model_dir).float().eval()
        if not check_quality(ref, tok, train_world, eval_world, eot_id):
            print("WARNING: reloaded checkpoint misses the quality gate")
    elif args.resume:
        model_dir = os.path.join(out, "model")
        workdir = tempfile.mkdtemp(prefix="fixtures_")
        for name in ("vocab.json", "merges.txt"):
            shutil.copy(os.path.join(model_dir, name), os.path.join(workdir, name))
        tok = ByteLevelBPETokenizer(os.path.join(workdir, "vocab.json"),
                                    os.path.join(workdir, "merges.txt"))
        eot_id = tok.get_vocab()[EOT]
        model, _ = train_model(tok, segments, eot_id, args.seed, args.epochs,
                               resume_from=model_dir)
        good = check_quality(model, tok, train_world, eval_world, eot_id)
        print("quality gate:", "PASS" if good else "WEAK (consider more epochs)")
        ref = save_checkpoint(model, model_dir, workdir)
        if not check_quality(ref, tok, train_world, eval_world, eot_id):
            print("WARNING: fp16-rounded model lost the quality gate")
    else:
        workdir = tempfile.mkdtemp(prefix="fixtures_")
        tok = train_tokenizer(segments, bpe_extra, workdir, args.vocab_size)
        eot_id = tok.get_vocab()[EOT]
        print(f"tokenizer: vocab {tok.get_vocab_size()}, eot id {eot_id}")

        model, _ = train_model(tok, segments, eot_id, args.seed, args.epochs)
        good = check_quality(model, tok, train_world, eval_world, eot_id)
        print("quality gate:", "PASS" if good else "WEAK (consider more epochs)")

        ref = save_checkpoint(model, os.path.join(out, "model"), workdir)
        if not check_quality(ref, tok, train_world, eval_world, eot_id):
            print("WARNING: fp16-rounded model lost the quality gate")
    dump_parity(ref, tok, os.path.join(out, "parity"), train_world, eval_world)
    dump_tokenizer_cases(tok, os.path.join(out, "tokenizer"))
    dump_generation(ref, tok, os.path.join(out, "qa"), train_world, eval_world, eot_id)
    dump_qa_dataset(random.Random(args.seed + 99), eval_world,
                    os.path.join(out, "qa", "eval.jsonl"))
    print("fixtures written to", out)


if __name__ == "__main__":
    sys.exit(main())

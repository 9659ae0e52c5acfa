#!/usr/bin/env python3
"""Regenerates the bundled toy corpora under crates/core/data/.

The output is deterministic; rerunning it must leave the files unchanged.
"""
import os
import random

OUT = os.path.join(os.path.dirname(__file__), "..", "crates", "core", "data")

WORDS = ("apple lemon river stone cloud paper music tiger robot candle "
         "garden window silver market pencil rocket forest planet bridge "
         "orange button camera dragon engine flower guitar island jacket "
         "kitten ladder mirror needle ocean pirate rabbit sugar tunnel "
         "zebra quiz jazz fox wizard yak banjo vortex jungle quartz").split()
NAMES = "x y n i total count value items data result acc buf key node".split()
PAIRS = {"(": ")", "[": "]", "{": "}"}


def bracket_line(rng):
    depth = rng.randint(1, 4)
    opens = "".join(rng.choice("([{") for _ in range(depth))
    closes = "".join(PAIRS[c] for c in reversed(opens))
    return f"close {opens} => {closes}"


def seq_line(rng):
    start = rng.randint(1, 9)
    step = rng.randint(1, 5)
    n = rng.randint(5, 7)
    return "seq " + " ".join(str(start + step * i) for i in range(n))


def echo_line(rng):
    w = rng.choice(WORDS)
    return f"echo {w} : {w}"


IDIOMS = [
    "def add(a, b):\n    return a + b",
    "def mul(a, b):\n    return a * b",
    "def sub(a, b):\n    return a - b",
    "for i in range(n):\n    total += i",
    "if x is None:\n    return None",
    "while node is not None:\n    node = node.next",
    "with open(path) as f:\n    data = f.read()",
    "import os\nimport sys",
    "print(result)",
    "items.append(value)",
    "return len(items)",
    "except ValueError:\n    pass",
]


def code_line(rng):
    kind = rng.randint(0, 3)
    a, b = rng.sample(NAMES, 2)
    if kind == 0:
        return rng.choice(IDIOMS)
    if kind == 1:
        return f"{a} = {b} + {rng.randint(0, 9)}"
    if kind == 2:
        return f"if {a} > {b}:\n    {a} = {b}"
    return f"def get_{a}(self):\n    return self.{a}"


CLASSES = "HttpServer JsonParser QueueItem ZipFile XmlNode UserId VecMap KeyError".split()
CONSTS = "MAX_SIZE BUF_LEN DEFAULT_PORT TIMEOUT_MS RETRY_COUNT API_KEY".split()


def ident(rng):
    base = rng.choice(NAMES + [w[:4] for w in WORDS])
    return base + rng.choice(["", "", "_" + rng.choice(NAMES), str(rng.randint(0, 99))])


def text_line(rng):
    """Strings, comments and operators: every printable byte and tabs."""
    w1, w2, w3 = rng.sample(WORDS, 3)
    a, b = ident(rng), ident(rng)
    n = rng.randint(0, 999)
    c, k = rng.choice(CLASSES), rng.choice(CONSTS)
    forms = [
        f'print("{w1.capitalize()}, {w2}!")',
        f"msg = '{w1} {w2}: %d%%' % {a}",
        f"# TODO: fix #{n} ({w1}/{w2}) ~{w3}",
        f'path = "/usr/{w1}/{w2}.txt"',
        f'email = "{w1}@{w2}.org"',
        f'url = "https://{w1}.io/?q={n}&r={w2}"',
        f"{k} = {n}",
        f"class {c}({rng.choice(CLASSES)}):\n    pass",
        f"{a} = {b} ^ {n} | ~{a} & 0x{n:X}",
        f"if ({a} != {b} && {a} <= {n}) {{\n\t{a} += {n};\n}}",
        f"int {a} = {b}[{n}]; // {w1}",
        f"{a} = `{w1} -{w2[0]}` $HOME",
        f"@{w1}\ndef {w2}(self, *args, **kw):\n    return {c}(args)",
        f's = "{w1}\\t{w2}\\n"; {a} = \'{w3}\'',
        f"assert {a} >= {n}, \"{w1.upper()} {w2}?\"",
        f"for (i = 0; i < {n}; i++) {{\n\t{a}[i] = {b};\n}}",
        f"{c}.{w1}_{w2}({a}={n}; {b}=None)",
        f"x{n % 10}, Y{n % 7} = {w1.title()}{w2.title()}[{a}]",
    ]
    return rng.choice(forms)


def base_corpus(seed, n_bytes):
    rng = random.Random(seed)
    gens = [bracket_line, seq_line, echo_line, code_line, code_line, text_line, text_line, text_line]
    out = []
    size = 0
    while size < n_bytes:
        line = rng.choice(gens)(rng) + "\n"
        out.append(line)
        size += len(line)
    return "".join(out)


def instruct_corpus(seed, n_bytes):
    # Instruction/response pairs.
    rng = random.Random(seed)
    verbs = ["Write a function that returns", "Implement code to compute",
             "Create a helper returning", "Show how to get"]
    things = ["the sum of a and b", "the product of a and b", "the length of items",
              "the last element", "the first key", "the maximum value"]
    bodies = ["return a + b", "return a * b", "return len(items)",
              "return items[-1]", "return keys[0]", "return max(values)"]
    out, size = [], 0
    while size < n_bytes:
        j = rng.randrange(len(things))
        name = rng.choice(NAMES)
        text = (f"### Instruction: {rng.choice(verbs)} {things[j]}.\n"
                f"### Response:\ndef f_{name}(a, b):\n    {bodies[j]}\n\n")
        out.append(text)
        size += len(text)
    return "".join(out)


def chat_corpus(seed, n_bytes):
    # Conversational question/answer turns.
    rng = random.Random(seed)
    qs = ["how do i reverse a list", "what does len do", "how to read a file",
          "why is my loop slow", "how do i sort values", "what is a dict"]
    ans = ["use items.reverse() or items[::-1]", "len returns the number of items",
           "use open(path) and f.read()", "avoid work inside the loop body",
           "call sorted(values)", "a dict maps keys to values"]
    out, size = [], 0
    while size < n_bytes:
        j = rng.randrange(len(qs))
        w = rng.choice(WORDS)
        text = f"USER: {qs[j]} with {w}?\nASSISTANT: {ans[j]}.\n"
        out.append(text)
        size += len(text)
    return "".join(out)


def main():
    files = {
        "base.txt": base_corpus(1, 160_000),
        "heldout.txt": base_corpus(2, 24_000),
        "attack_instruct.txt": instruct_corpus(3, 40_000),
        "attack_chat.txt": chat_corpus(4, 40_000),
    }
    for name, text in files.items():
        with open(os.path.join(OUT, name), "w", newline="\n") as f:
            f.write(text)


if __name__ == "__main__":
    main()

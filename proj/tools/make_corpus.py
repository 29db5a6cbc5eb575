#!/usr/bin/env python3
# SPDX-License-Identifier: Apache-2.0
"""Generate the bundled sample corpus of short template stories.

The output is deterministic for a given seed and size.
"""
import argparse
import random

NAMES = ["Mia", "Tom", "Lily", "Ben", "Sara", "Max", "Anna", "Leo", "Zoe", "Sam", "Ella", "Jack",
         "Nora", "Finn", "Ruby", "Owen", "Lucy", "Theo", "Ivy", "Noah"]
ANIMALS = ["cat", "dog", "bird", "frog", "bunny", "fox", "duck", "bear", "mouse", "owl"]
PLACES = ["park", "garden", "forest", "beach", "kitchen", "school", "farm", "river", "hill", "library"]
THINGS = ["ball", "kite", "box", "hat", "book", "cake", "drum", "boat", "shell", "flower", "apple", "key"]
COLORS = ["red", "blue", "green", "yellow", "big", "small", "shiny", "soft", "old", "new"]
FEELINGS = ["happy", "sad", "scared", "excited", "tired", "proud", "surprised", "curious"]
VERBS = ["found", "saw", "lost", "made", "shared", "painted", "carried", "hid"]
WEATHER = ["sunny", "rainy", "windy", "cold", "warm", "quiet", "bright"]

OPENINGS = [
    "Once upon a time, there was a {adj} {animal} named {name}.",
    "One {weather} day, {name} went to the {place}.",
    "{name} and {name2} liked to play in the {place}.",
    "There was a little {animal} who lived near the {place}.",
]
MIDDLES = [
    "{name} {verb} a {adj} {thing} under a tree.",
    "The {animal} wanted the {thing}, but it was too high.",
    "{name2} said, \"Can I play with your {thing}?\"",
    "{name} felt {feeling} and looked around the {place}.",
    "They ran to the {place} to look for the {thing}.",
    "\"Look at this {adj} {thing}!\" said {name}.",
    "The {animal} jumped and the {thing} fell down.",
    "{name} asked the {animal} to help find the {thing}.",
    "It was {weather}, so {name} took the {thing} home.",
]
ENDINGS = [
    "In the end, {name} and {name2} were {feeling} and shared the {thing}.",
    "{name} learned that it is good to share.",
    "From that day on, the {animal} and {name} were best friends.",
    "They went home and had a {adj} cake. The end.",
    "{name} smiled and said, \"Thank you, {name2}!\"",
]


def story(rng: random.Random) -> str:
    slots = {
        "name": rng.choice(NAMES), "animal": rng.choice(ANIMALS), "place": rng.choice(PLACES),
        "thing": rng.choice(THINGS), "adj": rng.choice(COLORS), "feeling": rng.choice(FEELINGS),
        "verb": rng.choice(VERBS), "weather": rng.choice(WEATHER),
    }
    slots["name2"] = rng.choice([n for n in NAMES if n != slots["name"]])
    parts = [rng.choice(OPENINGS)]
    parts += rng.sample(MIDDLES, rng.randint(2, 4))
    parts.append(rng.choice(ENDINGS))
    return " ".join(p.format(**slots) for p in parts)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="data/tiny_tales.txt")
    ap.add_argument("--bytes", type=int, default=1_000_000)
    ap.add_argument("--seed", type=int, default=2024)
    args = ap.parse_args()
    rng = random.Random(args.seed)
    chunks, size = [], 0
    while size < args.bytes:
        s = story(rng) + "\n\n"
        chunks.append(s)
        size += len(s.encode())
    text = "".join(chunks)[: args.bytes]
    with open(args.out, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


if __name__ == "__main__":
    main()

//! Synthetic code/summary corpora in a Java-like and a JavaScript-like
//! flavour. Each pair instantiates one of a few dozen method templates with
//! random field names; the summary describes what the method does.
//!
//! Identifiers are snake_case so that the word-level tokenizer splits them
//! into words that also appear in the summaries.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{parse_jsonl, CodeSummaryPair};

const NOUNS: &[&str] = &[
    "user", "name", "account", "order", "item", "price", "count", "total", "value", "index", "file",
    "path", "buffer", "node", "key", "size", "color", "width", "height", "date", "time", "message",
    "status", "email", "address", "phone", "score", "level", "balance", "amount", "rate", "limit",
    "cache", "queue", "token", "session", "config", "title", "label", "owner", "group", "role",
    "version", "port", "host", "url", "request", "response", "record", "entry", "event", "task",
    "job", "image", "page", "customer", "product", "payment", "invoice", "report",
];

const ADJECTIVES: &[&str] = &[
    "empty", "valid", "active", "visible", "enabled", "ready", "open", "closed", "locked", "full",
    "expired", "dirty",
];

const JAVA_TYPES: &[&str] = &["int", "String", "long", "double", "boolean", "float"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flavor {
    Java,
    JavaScript,
}

impl Flavor {
    pub fn tag(self) -> &'static str {
        match self {
            Flavor::Java => "java",
            Flavor::JavaScript => "javascript",
        }
    }
}

struct Slot {
    /// snake_case identifier, e.g. `user_name`
    ident: String,
    /// the same words separated by spaces
    words: String,
    ty: &'static str,
    adj: &'static str,
}

fn slot(rng: &mut ChaCha8Rng) -> Slot {
    let n = if rng.random_bool(0.5) { 1 } else { 2 };
    let parts: Vec<&str> = (0..n).map(|_| *NOUNS.choose(rng).unwrap()).collect();
    Slot {
        ident: parts.join("_"),
        words: parts.join(" "),
        ty: JAVA_TYPES.choose(rng).unwrap(),
        adj: ADJECTIVES.choose(rng).unwrap(),
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, options: &[&'a str]) -> &'a str {
    options.choose(rng).unwrap()
}

fn java(kind: usize, s: &Slot, rng: &mut ChaCha8Rng) -> (String, String) {
    let (f, w, t, a) = (&s.ident, &s.words, s.ty, s.adj);
    match kind {
        0 => (
            format!("public {t} get_{f}() {{ return this.{f}; }}"),
            format!("{} the {w}", pick(rng, &["returns", "gets"])),
        ),
        1 => (
            format!("public void set_{f}({t} {f}) {{ this.{f} = {f}; }}"),
            format!("{} the {w}", pick(rng, &["sets", "updates"])),
        ),
        2 => (
            format!("public boolean is_{a}() {{ return this.{a}; }}"),
            format!("{} if the object is {a}", pick(rng, &["checks", "returns true"])),
        ),
        3 => (
            format!("public boolean has_{f}() {{ return this.{f} != null; }}"),
            format!("checks whether the {w} is set"),
        ),
        4 => (
            format!("public void add_{f}({t} {f}) {{ this.{f}_list.add({f}); }}"),
            format!("adds a {w} to the list"),
        ),
        5 => (
            format!("public boolean remove_{f}({t} {f}) {{ return this.{f}_list.remove({f}); }}"),
            format!("removes the given {w} from the list"),
        ),
        6 => (
            format!("public int count_{f}() {{ return this.{f}_list.size(); }}"),
            format!("returns the number of {w} entries"),
        ),
        7 => (
            format!("public int sum_{f}(int[] values) {{ int total = 0; for (int v : values) {{ total += v; }} return total; }}"),
            format!("{} the sum of the {w} values", pick(rng, &["computes", "returns"])),
        ),
        8 => (
            format!("public int max_{f}(int[] values) {{ int best = values[0]; for (int v : values) {{ if (v > best) {{ best = v; }} }} return best; }}"),
            format!("returns the maximum {w}"),
        ),
        9 => (
            format!("public void clear_{f}() {{ this.{f}_list.clear(); }}"),
            format!("removes all {w} entries"),
        ),
        10 => (
            format!("public {t} find_{f}_by_id(int id) {{ for ({t} x : this.{f}_list) {{ if (x.id == id) {{ return x; }} }} return null; }}"),
            format!("finds the {w} with the given id"),
        ),
        11 => (
            format!("public String to_string() {{ return \"{f}=\" + this.{f}; }}"),
            format!("returns a string representation of the {w}"),
        ),
        12 => (
            format!("public void save_{f}({t} {f}) throws IOException {{ this.writer.write({f}); this.writer.flush(); }}"),
            format!("{} the {w} to the output", pick(rng, &["writes", "saves"])),
        ),
        13 => (
            format!("public boolean equals_{f}({t} other) {{ return this.{f} == other; }}"),
            format!("compares the {w} with another value"),
        ),
        14 => (
            format!("public void reset_{f}() {{ this.{f} = 0; }}"),
            format!("resets the {w} to zero"),
        ),
        15 => (
            format!("public void increment_{f}() {{ this.{f} += 1; }}"),
            format!("increments the {w} by one"),
        ),
        16 => (
            format!("public void validate_{f}({t} {f}) {{ if ({f} == null) {{ throw new IllegalArgumentException(\"{f}\"); }} }}"),
            format!("validates that the {w} is not null"),
        ),
        _ => (
            format!("public {t} load_{f}(String path) throws IOException {{ return this.reader.read(path); }}"),
            format!("loads the {w} from the given path"),
        ),
    }
}

fn javascript(kind: usize, s: &Slot, rng: &mut ChaCha8Rng) -> (String, String) {
    let (f, w, a) = (&s.ident, &s.words, s.adj);
    match kind {
        0 => (
            format!("function get_{f}() {{ return this.{f}; }}"),
            format!("{} the {w}", pick(rng, &["returns", "gets"])),
        ),
        1 => (
            format!("function set_{f}({f}) {{ this.{f} = {f}; }}"),
            format!("{} the {w}", pick(rng, &["sets", "updates"])),
        ),
        2 => (
            format!("function is_{a}() {{ return this.{a} === true; }}"),
            format!("{} if the object is {a}", pick(rng, &["checks", "returns true"])),
        ),
        3 => (
            format!("function has_{f}() {{ return this.{f} !== undefined; }}"),
            format!("checks whether the {w} is set"),
        ),
        4 => (
            format!("function add_{f}({f}) {{ this.{f}_list.push({f}); }}"),
            format!("adds a {w} to the list"),
        ),
        5 => (
            format!("function remove_{f}({f}) {{ const i = this.{f}_list.indexOf({f}); if (i >= 0) {{ this.{f}_list.splice(i, 1); }} }}"),
            format!("removes the given {w} from the list"),
        ),
        6 => (
            format!("function count_{f}() {{ return this.{f}_list.length; }}"),
            format!("returns the number of {w} entries"),
        ),
        7 => (
            format!("function sum_{f}(values) {{ let total = 0; for (const v of values) {{ total += v; }} return total; }}"),
            format!("{} the sum of the {w} values", pick(rng, &["computes", "returns"])),
        ),
        8 => (
            format!("function max_{f}(values) {{ return Math.max(...values); }}"),
            format!("returns the maximum {w}"),
        ),
        9 => (
            format!("function clear_{f}() {{ this.{f}_list = []; }}"),
            format!("removes all {w} entries"),
        ),
        10 => (
            format!("function find_{f}_by_id(id) {{ return this.{f}_list.find((x) => x.id === id); }}"),
            format!("finds the {w} with the given id"),
        ),
        11 => (
            format!("function to_string() {{ return `{f}=${{this.{f}}}`; }}"),
            format!("returns a string representation of the {w}"),
        ),
        12 => (
            format!("async function save_{f}({f}) {{ await this.writer.write({f}); }}"),
            format!("{} the {w} to the output", pick(rng, &["writes", "saves"])),
        ),
        13 => (
            format!("function equals_{f}(other) {{ return this.{f} === other; }}"),
            format!("compares the {w} with another value"),
        ),
        14 => (
            format!("function reset_{f}() {{ this.{f} = 0; }}"),
            format!("resets the {w} to zero"),
        ),
        15 => (
            format!("function increment_{f}() {{ this.{f} += 1; }}"),
            format!("increments the {w} by one"),
        ),
        16 => (
            format!("function validate_{f}({f}) {{ if ({f} == null) {{ throw new TypeError('{f}'); }} }}"),
            format!("validates that the {w} is not null"),
        ),
        _ => (
            format!("async function load_{f}(path) {{ return await this.reader.read(path); }}"),
            format!("loads the {w} from the given path"),
        ),
    }
}

pub const TEMPLATE_COUNT: usize = 18;

/// `count` distinct pairs, deterministic in `seed`.
pub fn generate(flavor: Flavor, count: usize, seed: u64) -> Vec<CodeSummaryPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let kind = rng.random_range(0..TEMPLATE_COUNT);
        let s = slot(&mut rng);
        let (code, summary) = match flavor {
            Flavor::Java => java(kind, &s, &mut rng),
            Flavor::JavaScript => javascript(kind, &s, &mut rng),
        };
        if seen.insert(code.clone()) {
            out.push(CodeSummaryPair::new(code, &summary, flavor.tag()).expect("templates are nonempty"));
        }
    }
    out
}

pub const BUNDLED_SIZE: usize = 2400;
pub const BUNDLED_SEEDS: [u64; 2] = [2024, 2025];

pub(crate) const JAVA_JSONL: &str = include_str!("../data/toy_java.jsonl");
pub(crate) const JAVASCRIPT_JSONL: &str = include_str!("../data/toy_javascript.jsonl");

/// The bundled Java-flavoured corpus.
pub fn java_corpus() -> Vec<CodeSummaryPair> {
    parse_jsonl(JAVA_JSONL.as_bytes()).expect("bundled corpus parses").pairs
}

/// The bundled JavaScript-flavoured corpus.
pub fn javascript_corpus() -> Vec<CodeSummaryPair> {
    parse_jsonl(JAVASCRIPT_JSONL.as_bytes()).expect("bundled corpus parses").pairs
}

/// Bundled corpus by language tag.
pub fn bundled(tag: &str) -> Option<Vec<CodeSummaryPair>> {
    match tag {
        "java" | "toy-java" => Some(java_corpus()),
        "javascript" | "toy-javascript" => Some(javascript_corpus()),
        _ => None,
    }
}

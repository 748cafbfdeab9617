//! Linear-time WordPiece matching.
//!
//! The vocabulary is compiled into a trie with two roots: one for word-head
//! tokens and one for `##` continuations. Each node carries a failure link
//! and the list of tokens to emit when following it ("failure pops"), so a
//! word is consumed in a single left-to-right pass with no rescanning, and
//! the output equals greedy longest-match-first.

use std::collections::{HashMap, VecDeque};

const ROOT: u32 = 0;
const SUFFIX_ROOT: u32 = 1;

#[derive(Clone, Debug, Default)]
struct Node {
    children: HashMap<char, u32>,
    token: Option<u32>,
    fail: Option<u32>,
    pops: Vec<u32>,
}

#[derive(Clone, Debug)]
pub struct FastMatcher {
    nodes: Vec<Node>,
}

impl FastMatcher {
    /// `tokens` are `(id, string)` pairs; `##`-prefixed strings are
    /// continuations.
    pub fn build<'a>(tokens: impl IntoIterator<Item = (u32, &'a str)>) -> Self {
        let mut nodes = vec![Node::default(), Node::default()];
        for (id, tok) in tokens {
            let (mut cur, body) = match tok.strip_prefix("##") {
                Some(rest) => (SUFFIX_ROOT, rest),
                None => (ROOT, tok),
            };
            if body.is_empty() {
                continue;
            }
            for c in body.chars() {
                let next = match nodes[cur as usize].children.get(&c) {
                    Some(&n) => n,
                    None => {
                        nodes.push(Node::default());
                        let n = (nodes.len() - 1) as u32;
                        nodes[cur as usize].children.insert(c, n);
                        n
                    }
                };
                cur = next;
            }
            nodes[cur as usize].token.get_or_insert(id);
        }

        let mut queue: VecDeque<u32> = VecDeque::from([ROOT, SUFFIX_ROOT]);
        while let Some(u) = queue.pop_front() {
            let mut children: Vec<(char, u32)> = nodes[u as usize].children.iter().map(|(&c, &v)| (c, v)).collect();
            children.sort_unstable();
            for (c, v) in children {
                if let Some(tok) = nodes[v as usize].token {
                    nodes[v as usize].fail = Some(SUFFIX_ROOT);
                    nodes[v as usize].pops = vec![tok];
                } else {
                    let mut pops = nodes[u as usize].pops.clone();
                    let mut z = nodes[u as usize].fail;
                    while let Some(zz) = z {
                        if nodes[zz as usize].children.contains_key(&c) {
                            break;
                        }
                        pops.extend_from_slice(&nodes[zz as usize].pops);
                        z = nodes[zz as usize].fail;
                    }
                    nodes[v as usize].fail = z.map(|zz| nodes[zz as usize].children[&c]);
                    nodes[v as usize].pops = pops;
                }
                queue.push_back(v);
            }
        }
        Self { nodes }
    }

    /// Token ids for one pre-tokenized word, or `None` if some part of the
    /// word cannot be matched.
    pub fn match_word(&self, word: &str) -> Option<Vec<u32>> {
        let mut out = Vec::new();
        if word.is_empty() {
            return Some(out);
        }
        let mut u = ROOT;
        for c in word.chars() {
            loop {
                let node = &self.nodes[u as usize];
                if let Some(&v) = node.children.get(&c) {
                    u = v;
                    break;
                }
                let f = node.fail?;
                out.extend_from_slice(&node.pops);
                u = f;
            }
        }
        while u != SUFFIX_ROOT {
            let node = &self.nodes[u as usize];
            let f = node.fail?;
            out.extend_from_slice(&node.pops);
            u = f;
        }
        Some(out)
    }
}

/// Greedy longest-match-first over explicit substring lookups; the
/// reference the trie matcher must agree with.
pub fn greedy_reference(word: &str, lookup: impl Fn(&str) -> Option<u32>) -> Option<Vec<u32>> {
    let chars: Vec<char> = word.chars().collect();
    let mut out = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while start < end {
            let piece: String = chars[start..end].iter().collect();
            let key = if start > 0 { format!("##{piece}") } else { piece };
            if let Some(id) = lookup(&key) {
                found = Some(id);
                break;
            }
            end -= 1;
        }
        out.push(found?);
        start = end;
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matcher(tokens: &[&str]) -> (FastMatcher, HashMap<String, u32>) {
        let map: HashMap<String, u32> = tokens.iter().enumerate().map(|(i, t)| (t.to_string(), i as u32)).collect();
        let m = FastMatcher::build(tokens.iter().enumerate().map(|(i, t)| (i as u32, *t)));
        (m, map)
    }

    #[test]
    fn unaffable() {
        let (m, map) = matcher(&["un", "##aff", "##able"]);
        assert_eq!(m.match_word("unaffable"), Some(vec![0, 1, 2]));
        assert_eq!(greedy_reference("unaffable", |s| map.get(s).copied()), Some(vec![0, 1, 2]));
    }

    #[test]
    fn backtracking_through_failure_links() {
        let toks = ["a", "abcdx", "##b", "##c", "##cdy", "##d"];
        let (m, map) = matcher(&toks);
        let look = |s: &str| map.get(s).copied();
        for w in ["abcdz", "abcd", "abcdx", "abcdy", "ab", "a", "abcdxb"] {
            assert_eq!(m.match_word(w), greedy_reference(w, look), "{w}");
        }
        assert_eq!(m.match_word("abcd"), Some(vec![0, 2, 3, 5]));
        assert_eq!(m.match_word("abcdz"), None);
    }

    #[test]
    fn unknown_first_char() {
        let (m, _) = matcher(&["a", "##a"]);
        assert_eq!(m.match_word("b"), None);
        assert_eq!(m.match_word("aaa"), Some(vec![0, 1, 1]));
        assert_eq!(m.match_word(""), Some(vec![]));
    }
}

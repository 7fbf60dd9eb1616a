//! Behavior-tree genotypes and the reactive tick engine.
//!
//! A [`Genotype`] is the flat token string manipulated by the genetic
//! operators (`s(`, `f(`, `)` and leaf names). A [`BehaviorTree`] is the
//! parsed form that gets ticked against a [`World`].

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default upper bound on the number of nodes in a genotype.
pub const DEFAULT_NODE_CAP: usize = 64;

/// Number of generate-and-test attempts before falling back to repair.
pub const MAX_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BtError {
    #[error("malformed genotype: {0}")]
    Malformed(String),
    #[error("unknown behavior `{0}`")]
    UnknownBehavior(String),
    #[error("token index {index} out of range (genotype has {len} tokens)")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("token {0} is a close token and does not address a node")]
    NotANode(usize),
    #[error("behavior pool is empty")]
    PoolEmpty,
    #[error("duplicate behavior `{0}` in pool")]
    DuplicateBehavior(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ControlKind {
    Sequence,
    Fallback,
}

impl ControlKind {
    pub fn other(self) -> Self {
        match self {
            ControlKind::Sequence => ControlKind::Fallback,
            ControlKind::Fallback => ControlKind::Sequence,
        }
    }

    fn open_str(self) -> &'static str {
        match self {
            ControlKind::Sequence => "s(",
            ControlKind::Fallback => "f(",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LeafKind {
    Action,
    Condition,
}

/// Index of a behavior inside a [`Vocabulary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LeafId(pub u16);

impl LeafId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Open(ControlKind),
    Close,
    Leaf(LeafId),
}

impl Token {
    pub fn is_close(self) -> bool {
        matches!(self, Token::Close)
    }
}

/// Names and static kinds of the leaves available to the search.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocabulary {
    names: Vec<String>,
    kinds: Vec<LeafKind>,
    index: HashMap<String, LeafId>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, kind: LeafKind) -> Result<LeafId, BtError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(BtError::DuplicateBehavior(name));
        }
        let id = LeafId(self.names.len() as u16);
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.kinds.push(kind);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn contains(&self, id: LeafId) -> bool {
        id.index() < self.names.len()
    }

    pub fn name(&self, id: LeafId) -> &str {
        &self.names[id.index()]
    }

    pub fn kind(&self, id: LeafId) -> LeafKind {
        self.kinds[id.index()]
    }

    pub fn lookup(&self, name: &str) -> Option<LeafId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = LeafId> + '_ {
        (0..self.names.len()).map(|i| LeafId(i as u16))
    }

    pub fn actions(&self) -> impl Iterator<Item = LeafId> + '_ {
        self.ids().filter(|&id| self.kind(id) == LeafKind::Action)
    }

    pub fn random_leaf<R: Rng + ?Sized>(&self, rng: &mut R) -> LeafId {
        LeafId(rng.gen_range(0..self.names.len()) as u16)
    }
}

/// Flat token encoding of a behavior tree.
///
/// Always structurally well formed: either a single leaf, or a control
/// open token whose matching close is the last token, with balanced
/// scopes in between. Structural *validity* (the four shape constraints)
/// is a separate check, see [`violations`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Genotype {
    tokens: Vec<Token>,
}

impl Genotype {
    pub fn from_tokens(tokens: Vec<Token>) -> Result<Self, BtError> {
        if tokens.is_empty() {
            return Err(BtError::Malformed("empty token sequence".into()));
        }
        if tokens.len() == 1 {
            return match tokens[0] {
                Token::Leaf(_) => Ok(Self { tokens }),
                _ => Err(BtError::Malformed("a one-token genotype must be a leaf".into())),
            };
        }
        if !matches!(tokens[0], Token::Open(_)) {
            return Err(BtError::Malformed("multi-token genotype must start with a control node".into()));
        }
        let mut depth = 0usize;
        for (i, tok) in tokens.iter().enumerate() {
            match tok {
                Token::Open(_) => depth += 1,
                Token::Close => {
                    if depth == 0 {
                        return Err(BtError::Malformed(format!("unmatched `)` at token {i}")));
                    }
                    depth -= 1;
                    if depth == 0 && i + 1 != tokens.len() {
                        return Err(BtError::Malformed(format!("tokens after the root closes at {i}")));
                    }
                }
                Token::Leaf(_) => {}
            }
        }
        if depth != 0 {
            return Err(BtError::Malformed(format!("{depth} unclosed control node(s)")));
        }
        Ok(Self { tokens })
    }

    /// Skips the structural checks; callers splice whole subtrees only.
    pub(crate) fn from_tokens_unchecked(tokens: Vec<Token>) -> Self {
        debug_assert!(Self::from_tokens(tokens.clone()).is_ok());
        Self { tokens }
    }

    pub fn leaf(id: LeafId) -> Self {
        Self { tokens: vec![Token::Leaf(id)] }
    }

    /// Parses the whitespace separated text form, e.g. `s( pick place )`.
    pub fn parse_text(text: &str, vocab: &Vocabulary) -> Result<Self, BtError> {
        let tokens = text
            .split_whitespace()
            .map(|word| match word {
                "s(" => Ok(Token::Open(ControlKind::Sequence)),
                "f(" => Ok(Token::Open(ControlKind::Fallback)),
                ")" => Ok(Token::Close),
                name => vocab
                    .lookup(name)
                    .map(Token::Leaf)
                    .ok_or_else(|| BtError::UnknownBehavior(name.to_string())),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_tokens(tokens)
    }

    pub fn to_text(&self, vocab: &Vocabulary) -> String {
        self.display(vocab).to_string()
    }

    pub fn display<'a>(&'a self, vocab: &'a Vocabulary) -> GenotypeDisplay<'a> {
        GenotypeDisplay { genotype: self, vocab }
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn into_tokens(self) -> Vec<Token> {
        self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of nodes, i.e. tokens that are not `)`.
    pub fn node_count(&self) -> usize {
        self.tokens.iter().filter(|t| !t.is_close()).count()
    }

    /// Token positions of every node, in depth-first order.
    pub fn node_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| !t.is_close())
            .map(|(i, _)| i)
    }

    pub fn leaves(&self) -> impl Iterator<Item = LeafId> + '_ {
        self.tokens.iter().filter_map(|t| match t {
            Token::Leaf(id) => Some(*id),
            _ => None,
        })
    }

    /// Contiguous token range of the subtree rooted at token `index`.
    pub fn subtree_span(&self, index: usize) -> Result<Range<usize>, BtError> {
        subtree_span(&self.tokens, index)
    }
}

pub struct GenotypeDisplay<'a> {
    genotype: &'a Genotype,
    vocab: &'a Vocabulary,
}

impl fmt::Display for GenotypeDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, tok) in self.genotype.tokens.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            match tok {
                Token::Open(kind) => f.write_str(kind.open_str())?,
                Token::Close => f.write_str(")")?,
                Token::Leaf(id) => f.write_str(self.vocab.name(*id))?,
            }
        }
        Ok(())
    }
}

/// Token range of the subtree starting at `index` in a balanced token slice.
pub fn subtree_span(tokens: &[Token], index: usize) -> Result<Range<usize>, BtError> {
    match tokens.get(index) {
        None => Err(BtError::IndexOutOfRange { index, len: tokens.len() }),
        Some(Token::Close) => Err(BtError::NotANode(index)),
        Some(Token::Leaf(_)) => Ok(index..index + 1),
        Some(Token::Open(_)) => {
            let mut depth = 0usize;
            for (offset, tok) in tokens[index..].iter().enumerate() {
                match tok {
                    Token::Open(_) => depth += 1,
                    Token::Close => {
                        depth -= 1;
                        if depth == 0 {
                            return Ok(index..index + offset + 1);
                        }
                    }
                    Token::Leaf(_) => {}
                }
            }
            Err(BtError::Malformed(format!("control node at {index} is never closed")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TickStatus {
    Success,
    Failure,
    Running,
}

/// Whatever executes leaves. Each leaf visit calls `execute` exactly once.
pub trait World {
    fn execute(&mut self, leaf: LeafId) -> Result<TickStatus, BtError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Node {
    Control { kind: ControlKind, children: Vec<Node> },
    Leaf { id: LeafId, kind: LeafKind },
}

impl Node {
    pub fn node_count(&self) -> usize {
        match self {
            Node::Leaf { .. } => 1,
            Node::Control { children, .. } => 1 + children.iter().map(Node::node_count).sum::<usize>(),
        }
    }

    /// Memoryless tick: every call re-evaluates children from the left.
    pub fn tick<W: World + ?Sized>(&self, world: &mut W) -> Result<TickStatus, BtError> {
        match self {
            Node::Leaf { id, .. } => world.execute(*id),
            Node::Control { kind: ControlKind::Sequence, children } => {
                for child in children {
                    match child.tick(world)? {
                        TickStatus::Success => continue,
                        other => return Ok(other),
                    }
                }
                Ok(TickStatus::Success)
            }
            Node::Control { kind: ControlKind::Fallback, children } => {
                for child in children {
                    match child.tick(world)? {
                        TickStatus::Failure => continue,
                        other => return Ok(other),
                    }
                }
                Ok(TickStatus::Failure)
            }
        }
    }

    fn write_tokens(&self, out: &mut Vec<Token>) {
        match self {
            Node::Leaf { id, .. } => out.push(Token::Leaf(*id)),
            Node::Control { kind, children } => {
                out.push(Token::Open(*kind));
                for child in children {
                    child.write_tokens(out);
                }
                out.push(Token::Close);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BehaviorTree {
    root: Node,
}

impl BehaviorTree {
    pub fn new(root: Node) -> Self {
        Self { root }
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn node_count(&self) -> usize {
        self.root.node_count()
    }

    pub fn tick<W: World + ?Sized>(&self, world: &mut W) -> Result<TickStatus, BtError> {
        self.root.tick(world)
    }
}

/// Builds the tree whose depth-first traversal reproduces the token string.
pub fn parse(genotype: &Genotype, vocab: &Vocabulary) -> Result<BehaviorTree, BtError> {
    let mut stack: Vec<(ControlKind, Vec<Node>)> = Vec::new();
    let mut root = None;
    for tok in genotype.tokens() {
        let finished = match *tok {
            Token::Open(kind) => {
                stack.push((kind, Vec::new()));
                None
            }
            Token::Leaf(id) => {
                if !vocab.contains(id) {
                    return Err(BtError::UnknownBehavior(format!("#{}", id.0)));
                }
                Some(Node::Leaf { id, kind: vocab.kind(id) })
            }
            Token::Close => {
                let (kind, children) = stack
                    .pop()
                    .ok_or_else(|| BtError::Malformed("unmatched `)`".into()))?;
                Some(Node::Control { kind, children })
            }
        };
        if let Some(node) = finished {
            match stack.last_mut() {
                Some((_, children)) => children.push(node),
                None => root = Some(node),
            }
        }
    }
    match (root, stack.is_empty()) {
        (Some(root), true) => Ok(BehaviorTree { root }),
        _ => Err(BtError::Malformed("unbalanced genotype".into())),
    }
}

pub fn serialize(tree: &BehaviorTree) -> Genotype {
    let mut tokens = Vec::with_capacity(tree.node_count() * 2);
    tree.root.write_tokens(&mut tokens);
    Genotype { tokens }
}

/// The structural constraints every individual must satisfy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Constraint {
    /// A control node directly under a control node of the same kind.
    NestedSameKind,
    /// A condition as the last child of a control node.
    ConditionLast,
    /// A control node without children.
    EmptyControl,
    /// Two identical conditions next to each other.
    AdjacentDuplicateConditions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Violation {
    pub constraint: Constraint,
    /// Token position of the offending node.
    pub token: usize,
}

#[derive(Clone, Copy)]
enum Sibling {
    None,
    Control,
    Leaf(LeafId, LeafKind),
}

struct Scope {
    kind: ControlKind,
    open: usize,
    children: usize,
    last: Sibling,
    last_token: usize,
}

/// Lists every constraint violation; empty means the genotype is valid.
pub fn violations(genotype: &Genotype, vocab: &Vocabulary) -> Result<Vec<Violation>, BtError> {
    let mut found = Vec::new();
    let mut stack: Vec<Scope> = Vec::new();
    for (i, tok) in genotype.tokens().iter().enumerate() {
        match *tok {
            Token::Open(kind) => {
                if let Some(parent) = stack.last_mut() {
                    if parent.kind == kind {
                        found.push(Violation { constraint: Constraint::NestedSameKind, token: i });
                    }
                    parent.children += 1;
                    parent.last = Sibling::Control;
                    parent.last_token = i;
                }
                stack.push(Scope { kind, open: i, children: 0, last: Sibling::None, last_token: i });
            }
            Token::Leaf(id) => {
                if !vocab.contains(id) {
                    return Err(BtError::UnknownBehavior(format!("#{}", id.0)));
                }
                let kind = vocab.kind(id);
                if let Some(parent) = stack.last_mut() {
                    if let Sibling::Leaf(prev, LeafKind::Condition) = parent.last {
                        if kind == LeafKind::Condition && prev == id {
                            found.push(Violation {
                                constraint: Constraint::AdjacentDuplicateConditions,
                                token: i,
                            });
                        }
                    }
                    parent.children += 1;
                    parent.last = Sibling::Leaf(id, kind);
                    parent.last_token = i;
                }
            }
            Token::Close => {
                let scope = stack
                    .pop()
                    .ok_or_else(|| BtError::Malformed("unmatched `)`".into()))?;
                if scope.children == 0 {
                    found.push(Violation { constraint: Constraint::EmptyControl, token: scope.open });
                }
                if let Sibling::Leaf(_, LeafKind::Condition) = scope.last {
                    found.push(Violation { constraint: Constraint::ConditionLast, token: scope.last_token });
                }
            }
        }
    }
    Ok(found)
}

pub fn is_valid(genotype: &Genotype, vocab: &Vocabulary) -> Result<bool, BtError> {
    violations(genotype, vocab).map(|v| v.is_empty())
}

/// Deletes the fewest nodes needed to satisfy every constraint.
///
/// A nested control of the same kind is dissolved into its parent, trailing
/// and adjacent duplicate conditions are dropped, and empty controls are
/// removed. If nothing survives, the first action of the pool is returned.
pub fn repair(genotype: &Genotype, vocab: &Vocabulary) -> Result<Genotype, BtError> {
    let tree = parse(genotype, vocab)?;
    match repair_node(tree.root) {
        Some(root) => Ok(serialize(&BehaviorTree { root })),
        None => {
            let fallback = vocab.actions().next().or_else(|| vocab.ids().next()).ok_or(BtError::PoolEmpty)?;
            Ok(Genotype::leaf(fallback))
        }
    }
}

fn repair_node(node: Node) -> Option<Node> {
    let (kind, children) = match node {
        leaf @ Node::Leaf { .. } => return Some(leaf),
        Node::Control { kind, children } => (kind, children),
    };
    let mut kept: Vec<Node> = Vec::with_capacity(children.len());
    for child in children.into_iter().filter_map(repair_node) {
        match child {
            Node::Control { kind: child_kind, children: grandchildren } if child_kind == kind => {
                kept.extend(grandchildren);
            }
            other => kept.push(other),
        }
    }
    kept.dedup_by(|b, a| {
        matches!((a, b), (Node::Leaf { id: x, kind: LeafKind::Condition }, Node::Leaf { id: y, .. }) if x == y)
    });
    while matches!(kept.last(), Some(Node::Leaf { kind: LeafKind::Condition, .. })) {
        kept.pop();
    }
    if kept.is_empty() {
        None
    } else {
        Some(Node::Control { kind, children: kept })
    }
}

/// Draws a valid genotype with `length` nodes.
///
/// Control kinds alternate by construction; the remaining constraints are
/// met by resampling, then by [`repair`] (which may return fewer nodes).
pub fn random_genotype<R: Rng + ?Sized>(
    vocab: &Vocabulary,
    length: usize,
    p_control: f64,
    rng: &mut R,
) -> Result<Genotype, BtError> {
    if vocab.is_empty() {
        return Err(BtError::PoolEmpty);
    }
    let length = length.max(1);
    let mut last = None;
    for _ in 0..MAX_ATTEMPTS {
        let candidate = draw_genotype(vocab, length, p_control, rng);
        if is_valid(&candidate, vocab)? {
            return Ok(candidate);
        }
        last = Some(candidate);
    }
    repair(&last.expect("at least one attempt"), vocab)
}

fn draw_genotype<R: Rng + ?Sized>(vocab: &Vocabulary, length: usize, p_control: f64, rng: &mut R) -> Genotype {
    let mut tokens = Vec::with_capacity(length * 2);
    if length == 1 {
        tokens.push(Token::Leaf(vocab.random_leaf(rng)));
    } else {
        let kind = if rng.gen_bool(0.5) { ControlKind::Sequence } else { ControlKind::Fallback };
        draw_control(vocab, kind, length, p_control, rng, &mut tokens);
    }
    Genotype { tokens }
}

fn draw_control<R: Rng + ?Sized>(
    vocab: &Vocabulary,
    kind: ControlKind,
    size: usize,
    p_control: f64,
    rng: &mut R,
    out: &mut Vec<Token>,
) {
    out.push(Token::Open(kind));
    let mut budget = size - 1;
    while budget > 0 {
        if budget >= 2 && rng.gen_bool(p_control) {
            let sub = rng.gen_range(2..=budget);
            draw_control(vocab, kind.other(), sub, p_control, rng, out);
            budget -= sub;
        } else {
            out.push(Token::Leaf(vocab.random_leaf(rng)));
            budget -= 1;
        }
    }
    out.push(Token::Close);
}

impl FromStr for ControlKind {
    type Err = BtError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "s(" | "sequence" => Ok(ControlKind::Sequence),
            "f(" | "fallback" => Ok(ControlKind::Fallback),
            other => Err(BtError::Malformed(format!("not a control token: {other}"))),
        }
    }
}

use crate::bitlinear::{BitLinearConfig, BitLinearLayer, LinearSlot, QuantMode};
use crate::error::{Error, Result};

pub enum Child<'a> {
    Linear(&'a LinearSlot),
    Module(&'a dyn Module),
    /// Non-linear leaf (norm, embedding, ...), identified by kind.
    Other(&'static str),
}

pub enum ChildMut<'a> {
    Linear(&'a mut LinearSlot),
    Module(&'a mut dyn Module),
    Other(&'static str),
}

/// A node in a named layer hierarchy.
pub trait Module {
    fn children(&self) -> Vec<(String, Child<'_>)>;
    fn children_mut(&mut self) -> Vec<(String, ChildMut<'_>)>;
}

/// Replaces every plain linear leaf reachable from `module` by a BitLinear
/// layer of mode `target` sharing the original parameters. Already-replaced
/// leaves are left alone, so the pass is idempotent. Returns the number of
/// leaves replaced.
pub fn replace_linear(module: &mut dyn Module, target: QuantMode, cfg: &BitLinearConfig) -> usize {
    let mut replaced = 0;
    for (_, child) in module.children_mut() {
        match child {
            ChildMut::Linear(slot) => {
                let bit = match &*slot {
                    LinearSlot::Plain(l) => Some(BitLinearLayer::from_linear(l, target, cfg)),
                    LinearSlot::Bit(_) => None,
                };
                if let Some(bit) = bit {
                    *slot = LinearSlot::Bit(bit);
                    replaced += 1;
                }
            }
            ChildMut::Module(m) => replaced += replace_linear(m, target, cfg),
            ChildMut::Other(_) => {}
        }
    }
    replaced
}

/// Linear sites per top-level region (`encoder`, `decoder`, `lm_head`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SiteCensus {
    pub encoder: usize,
    pub decoder: usize,
    pub head: usize,
    pub total: usize,
}

pub fn count_replacement_sites(module: &dyn Module) -> SiteCensus {
    let mut census = SiteCensus::default();
    for (name, child) in module.children() {
        let n = match child {
            Child::Linear(_) => 1,
            Child::Module(m) => collect_linears(m).len(),
            Child::Other(_) => 0,
        };
        match name.as_str() {
            "encoder" => census.encoder += n,
            "decoder" => census.decoder += n,
            "lm_head" => census.head += n,
            _ => {}
        }
        census.total += n;
    }
    census
}

/// Every linear leaf with its dotted path, in traversal order.
pub fn collect_linears(module: &dyn Module) -> Vec<(String, &LinearSlot)> {
    fn walk<'a>(m: &'a dyn Module, prefix: &str, out: &mut Vec<(String, &'a LinearSlot)>) {
        for (name, child) in m.children() {
            let path = if prefix.is_empty() {
                name
            } else {
                format!("{prefix}.{name}")
            };
            match child {
                Child::Linear(l) => out.push((path, l)),
                Child::Module(sub) => walk(sub, &path, out),
                Child::Other(_) => {}
            }
        }
    }
    let mut out = Vec::new();
    walk(module, "", &mut out);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerNode {
    Linear(LinearSlot),
    Tree(LayerTree),
    Other(&'static str),
}

/// Free-standing named hierarchy of layers; names are unique per level.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerTree {
    children: Vec<(String, LayerNode)>,
}

impl LayerTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, node: LayerNode) -> Result<()> {
        let name = name.into();
        if self.children.iter().any(|(n, _)| *n == name) {
            return Err(Error::Invalid(format!("duplicate child name `{name}`")));
        }
        self.children.push((name, node));
        Ok(())
    }

    pub fn with(mut self, name: impl Into<String>, node: LayerNode) -> Result<Self> {
        self.insert(name, node)?;
        Ok(self)
    }

    pub fn get(&self, name: &str) -> Option<&LayerNode> {
        self.children.iter().find(|(n, _)| n == name).map(|(_, c)| c)
    }

    pub fn len(&self) -> usize {
        self.children.len()
    }

    pub fn is_empty(&self) -> bool {
        self.children.is_empty()
    }
}

impl Module for LayerTree {
    fn children(&self) -> Vec<(String, Child<'_>)> {
        self.children
            .iter()
            .map(|(n, c)| {
                let c = match c {
                    LayerNode::Linear(l) => Child::Linear(l),
                    LayerNode::Tree(t) => Child::Module(t),
                    LayerNode::Other(k) => Child::Other(k),
                };
                (n.clone(), c)
            })
            .collect()
    }

    fn children_mut(&mut self) -> Vec<(String, ChildMut<'_>)> {
        self.children
            .iter_mut()
            .map(|(n, c)| {
                let c = match c {
                    LayerNode::Linear(l) => ChildMut::Linear(l),
                    LayerNode::Tree(t) => ChildMut::Module(t),
                    LayerNode::Other(k) => ChildMut::Other(k),
                };
                (n.clone(), c)
            })
            .collect()
    }
}

/// Puts every linear leaf into `mode`, undoing earlier replacements when
/// `mode` is `None`. Parameters are shared throughout.
pub fn set_linear_mode(module: &mut dyn Module, mode: QuantMode, cfg: &BitLinearConfig) {
    for (_, child) in module.children_mut() {
        match child {
            ChildMut::Linear(slot) => {
                let plain = slot.to_plain();
                *slot = match mode {
                    QuantMode::None => LinearSlot::Plain(plain),
                    m => LinearSlot::Bit(BitLinearLayer::from_linear(&plain, m, cfg)),
                };
            }
            ChildMut::Module(m) => set_linear_mode(m, mode, cfg),
            ChildMut::Other(_) => {}
        }
    }
}

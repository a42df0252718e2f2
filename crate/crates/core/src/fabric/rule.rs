use std::fmt;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use super::topology::NodeId;
use super::FabricError;
use crate::flow::{FlowKey, Protocol};

/// Match on the IP/TCP five-tuple subset. `None` fields are wildcards.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FlowMatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src_ip: Option<Ipv4Addr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dst_ip: Option<Ipv4Addr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src_port: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dst_port: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol: Option<Protocol>,
}

impl FlowMatch {
    pub fn src_ip(mut self, ip: Ipv4Addr) -> Self {
        self.src_ip = Some(ip);
        self
    }

    pub fn dst_ip(mut self, ip: Ipv4Addr) -> Self {
        self.dst_ip = Some(ip);
        self
    }

    pub fn src_port(mut self, port: u16) -> Self {
        self.src_port = Some(port);
        self
    }

    pub fn dst_port(mut self, port: u16) -> Self {
        self.dst_port = Some(port);
        self
    }

    pub fn protocol(mut self, protocol: Protocol) -> Self {
        self.protocol = Some(protocol);
        self
    }

    /// Exact match on every field of a flow.
    pub fn exact(flow: &FlowKey, protocol: Protocol) -> Self {
        FlowMatch {
            src_ip: Some(flow.src_ip),
            dst_ip: Some(flow.dst_ip),
            src_port: Some(flow.src_port),
            dst_port: Some(flow.dst_port),
            protocol: Some(protocol),
        }
    }

    pub fn is_wildcard(&self) -> bool {
        self.src_ip.is_none()
            && self.dst_ip.is_none()
            && self.src_port.is_none()
            && self.dst_port.is_none()
            && self.protocol.is_none()
    }

    pub fn matches(&self, flow: &FlowKey, protocol: Protocol) -> bool {
        fn field<T: PartialEq>(want: &Option<T>, have: &T) -> bool {
            want.as_ref().is_none_or(|w| w == have)
        }
        field(&self.src_ip, &flow.src_ip)
            && field(&self.dst_ip, &flow.dst_ip)
            && field(&self.src_port, &flow.src_port)
            && field(&self.dst_port, &flow.dst_port)
            && field(&self.protocol, &protocol)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Action {
    /// Send the packet, as modified so far, to an adjacent node.
    Forward {
        next_hop: NodeId,
    },
    /// Emit an independent copy toward an adjacent node.
    Duplicate {
        next_hop: NodeId,
    },
    RewriteDst {
        ip: Ipv4Addr,
        port: u16,
    },
    Drop,
}

impl Action {
    pub fn forward(next_hop: impl Into<NodeId>) -> Self {
        Action::Forward {
            next_hop: next_hop.into(),
        }
    }

    pub fn duplicate(next_hop: impl Into<NodeId>) -> Self {
        Action::Duplicate {
            next_hop: next_hop.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RuleId(pub u64);

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// A match/action entry before installation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowRule {
    #[serde(rename = "match")]
    pub matcher: FlowMatch,
    pub actions: Vec<Action>,
    pub priority: u32,
}

impl FlowRule {
    pub fn new(matcher: FlowMatch, actions: Vec<Action>, priority: u32) -> Self {
        FlowRule {
            matcher,
            actions,
            priority,
        }
    }

    /// Structural checks that do not depend on the switch the rule lands on.
    pub fn validate(&self) -> Result<(), FabricError> {
        let invalid = |m: &str| Err(FabricError::InvalidRule(m.to_string()));
        if self.matcher.is_wildcard() {
            return invalid("match must constrain at least one field");
        }
        if self.actions.is_empty() {
            return invalid("action list is empty");
        }
        let forwards = self
            .actions
            .iter()
            .filter(|a| matches!(a, Action::Forward { .. }))
            .count();
        let duplicates = self
            .actions
            .iter()
            .filter(|a| matches!(a, Action::Duplicate { .. }))
            .count();
        let drops = self
            .actions
            .iter()
            .filter(|a| matches!(a, Action::Drop))
            .count();
        if drops > 0 && self.actions.len() > 1 {
            return invalid("drop must be the only action");
        }
        if forwards > 1 {
            return invalid("at most one forward action");
        }
        if duplicates > 0 && forwards == 0 {
            return invalid("duplicate requires a primary forward action");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstalledRule {
    pub id: RuleId,
    #[serde(flatten)]
    pub rule: FlowRule,
}

/// Per-switch rule table.
#[derive(Debug, Clone, Default)]
pub struct FlowTable {
    // Kept in installation order; rule ids increase monotonically.
    rules: Vec<InstalledRule>,
}

impl FlowTable {
    pub fn insert(&mut self, rule: InstalledRule) {
        self.rules.push(rule);
    }

    pub fn remove(&mut self, id: RuleId) -> Option<InstalledRule> {
        let pos = self.rules.iter().position(|r| r.id == id)?;
        Some(self.rules.remove(pos))
    }

    /// Highest priority wins; among equal priorities the earliest installed.
    pub fn lookup(&self, flow: &FlowKey, protocol: Protocol) -> Option<&InstalledRule> {
        let mut best: Option<&InstalledRule> = None;
        for r in &self.rules {
            if !r.rule.matcher.matches(flow, protocol) {
                continue;
            }
            if best.is_none_or(|b| r.rule.priority > b.rule.priority) {
                best = Some(r);
            }
        }
        best
    }

    pub fn rules(&self) -> &[InstalledRule] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flow(dst_port: u16) -> FlowKey {
        FlowKey {
            src_ip: Ipv4Addr::new(10, 0, 0, 1),
            src_port: 40000,
            dst_ip: Ipv4Addr::new(10, 0, 0, 4),
            dst_port,
        }
    }

    #[test]
    fn rule_validation() {
        let m = FlowMatch::default().dst_port(80);
        assert!(FlowRule::new(m.clone(), vec![], 1).validate().is_err());
        assert!(FlowRule::new(m.clone(), vec![Action::duplicate("c")], 1)
            .validate()
            .is_err());
        assert!(
            FlowRule::new(m.clone(), vec![Action::Drop, Action::forward("x")], 1)
                .validate()
                .is_err()
        );
        assert!(FlowRule::new(FlowMatch::default(), vec![Action::Drop], 1)
            .validate()
            .is_err());
        assert!(FlowRule::new(
            m.clone(),
            vec![Action::forward("a"), Action::forward("b")],
            1
        )
        .validate()
        .is_err());
        assert!(
            FlowRule::new(m, vec![Action::forward("p"), Action::duplicate("c")], 1)
                .validate()
                .is_ok()
        );
    }

    #[test]
    fn strict_priority_then_install_order() {
        let mut t = FlowTable::default();
        assert!(t.lookup(&flow(80), Protocol::Tcp).is_none());
        let wild_src = FlowMatch::default().src_ip(Ipv4Addr::new(10, 0, 0, 1));
        t.insert(InstalledRule {
            id: RuleId(1),
            rule: FlowRule::new(wild_src, vec![Action::forward("a")], 5),
        });
        t.insert(InstalledRule {
            id: RuleId(2),
            rule: FlowRule::new(
                FlowMatch::default().dst_port(80),
                vec![Action::forward("b")],
                10,
            ),
        });
        t.insert(InstalledRule {
            id: RuleId(3),
            rule: FlowRule::new(
                FlowMatch::default().dst_port(80),
                vec![Action::forward("c")],
                10,
            ),
        });
        assert_eq!(t.lookup(&flow(80), Protocol::Tcp).unwrap().id, RuleId(2));
        assert_eq!(t.lookup(&flow(81), Protocol::Tcp).unwrap().id, RuleId(1));
        t.remove(RuleId(2));
        assert_eq!(t.lookup(&flow(80), Protocol::Tcp).unwrap().id, RuleId(3));
    }

    #[test]
    fn protocol_field_matches() {
        let m = FlowMatch::default().protocol(Protocol::Udp);
        assert!(!m.matches(&flow(53), Protocol::Tcp));
        assert!(m.matches(&flow(53), Protocol::Udp));
    }
}

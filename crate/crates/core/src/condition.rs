//! Token-sequence conditions.
//!
//! A scene prompt comes in four roles. The *base* condition describes the
//! context without the personalized identifier, the *target* condition is the
//! identifier followed by its class token, the *complete* condition is the base
//! condition with the identifier inserted, and the *null* condition carries a
//! single null token (id 0) used for unconditional prediction.

use crate::error::{Error, Result};

pub type TokenId = usize;

/// Reserved id of the null token. Its embedding is pinned to zero.
pub const NULL_TOKEN: TokenId = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Base,
    Target,
    Complete,
    Null,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Condition {
    role: Role,
    tokens: Vec<TokenId>,
    concept_slot: Option<usize>,
}

impl Condition {
    pub fn null() -> Self {
        Condition {
            role: Role::Null,
            tokens: vec![NULL_TOKEN],
            concept_slot: None,
        }
    }

    /// A context-only condition. Must not contain the null token.
    pub fn base(tokens: Vec<TokenId>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Empty("base condition tokens"));
        }
        if tokens.contains(&NULL_TOKEN) {
            return Err(Error::Vocabulary(
                "null token may only appear in the null condition".into(),
            ));
        }
        Ok(Condition {
            role: Role::Base,
            tokens,
            concept_slot: None,
        })
    }

    /// `[V] class`: the identifier token followed by its class token.
    pub fn target(concept: TokenId, class: TokenId) -> Result<Self> {
        if concept == NULL_TOKEN || class == NULL_TOKEN || concept == class {
            return Err(Error::Vocabulary(format!(
                "invalid target tokens (concept {concept}, class {class})"
            )));
        }
        Ok(Condition {
            role: Role::Target,
            tokens: vec![concept, class],
            concept_slot: Some(0),
        })
    }

    /// Inserts `concept` into `base` at `position`, keeping the base tokens in order.
    pub fn complete(base: &Condition, concept: TokenId, position: usize) -> Result<Self> {
        if base.role != Role::Base {
            return Err(Error::Contract(format!(
                "complete condition must extend a base condition, got {:?}",
                base.role
            )));
        }
        if concept == NULL_TOKEN || base.tokens.contains(&concept) {
            return Err(Error::Vocabulary(format!(
                "concept token {concept} must be new to the base condition"
            )));
        }
        if position > base.tokens.len() {
            return Err(Error::Index {
                what: "concept insertion position",
                index: position,
                limit: base.tokens.len() + 1,
            });
        }
        let mut tokens = base.tokens.clone();
        tokens.insert(position, concept);
        Ok(Condition {
            role: Role::Complete,
            tokens,
            concept_slot: Some(position),
        })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn concept_slot(&self) -> Option<usize> {
        self.concept_slot
    }

    /// The token sitting in the concept slot, if any.
    pub fn concept_token(&self) -> Option<TokenId> {
        self.concept_slot.map(|i| self.tokens[i])
    }

    pub fn is_null(&self) -> bool {
        self.role == Role::Null
    }

    /// For a complete condition, the base condition it was built from.
    pub fn base_part(&self) -> Result<Condition> {
        match (self.role, self.concept_slot) {
            (Role::Complete, Some(slot)) => {
                let mut tokens = self.tokens.clone();
                tokens.remove(slot);
                Condition::base(tokens)
            }
            (Role::Base, _) => Ok(self.clone()),
            _ => Err(Error::Contract(format!(
                "{:?} condition has no base part",
                self.role
            ))),
        }
    }

    /// For a complete condition, `[identifier, next token]`: the identifier
    /// and the class token it qualifies.
    pub fn target_part(&self) -> Result<Condition> {
        match (self.role, self.concept_slot) {
            (Role::Complete, Some(slot)) if slot + 1 < self.tokens.len() => {
                Condition::target(self.tokens[slot], self.tokens[slot + 1])
            }
            (Role::Target, _) => Ok(self.clone()),
            _ => Err(Error::Contract(format!(
                "{:?} condition has no target part",
                self.role
            ))),
        }
    }

    /// Largest token id, used for vocabulary range checks.
    pub fn max_token(&self) -> TokenId {
        self.tokens.iter().copied().max().unwrap_or(NULL_TOKEN)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complete_preserves_base_order() {
        let base = Condition::base(vec![1, 3]).unwrap();
        let complete = Condition::complete(&base, 4, 1).unwrap();
        assert_eq!(complete.tokens(), &[1, 4, 3]);
        assert_eq!(complete.concept_token(), Some(4));
        assert_eq!(complete.base_part().unwrap(), base);
        assert_eq!(complete.target_part().unwrap().tokens(), &[4, 3]);
    }

    #[test]
    fn null_has_exactly_the_null_token() {
        let n = Condition::null();
        assert_eq!(n.tokens(), &[NULL_TOKEN]);
        assert!(n.concept_token().is_none());
    }

    #[test]
    fn rejects_bad_constructions() {
        assert!(Condition::base(vec![]).is_err());
        assert!(Condition::base(vec![0, 1]).is_err());
        assert!(Condition::target(4, 4).is_err());
        let base = Condition::base(vec![1, 3]).unwrap();
        assert!(Condition::complete(&base, 3, 0).is_err());
        assert!(Condition::complete(&base, 4, 5).is_err());
        let target = Condition::target(4, 3).unwrap();
        assert!(Condition::complete(&target, 2, 0).is_err());
        assert!(target.base_part().is_err());
    }
}

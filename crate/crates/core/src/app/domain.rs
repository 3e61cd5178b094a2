//! Aggregates of the quizzes sample application.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::aggregate::{Aggregate, AggregateId};
use crate::error::{Error, Result};

pub const ANONYMOUS: &str = "ANONYMOUS";

pub const UPDATE_STUDENT_NAME_EVENT: &str = "UpdateStudentName";
pub const ANONYMIZE_USER_EVENT: &str = "AnonymizeUser";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Role {
    Student,
    Teacher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct User {
    pub name: String,
    pub role: Role,
    pub anonymized: bool,
}

impl Aggregate for User {
    const TYPE: &'static str = "User";

    fn verify_invariants(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::invariant("UserNameNotEmpty", "user name is empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnrolledStudent {
    pub user_id: AggregateId,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CourseExecution {
    pub course_id: u64,
    pub students: Vec<EnrolledStudent>,
}

impl CourseExecution {
    pub fn student(&self, user_id: AggregateId) -> Option<&EnrolledStudent> {
        self.students.iter().find(|s| s.user_id == user_id)
    }
}

impl Aggregate for CourseExecution {
    const TYPE: &'static str = "CourseExecution";

    fn verify_invariants(&self) -> Result<()> {
        let ids: BTreeSet<_> = self.students.iter().map(|s| s.user_id).collect();
        if ids.len() != self.students.len() {
            return Err(Error::invariant("UniqueEnrollment", "a student is enrolled twice"));
        }
        Ok(())
    }

    fn merge_fields(&self, committed: &Self, ancestor: &Self) -> Result<Self> {
        let as_map = |e: &Self| e.students.iter().map(|s| (s.user_id, s.name.clone())).collect::<BTreeMap<_, _>>();
        let merged = merge_map(&as_map(self), &as_map(committed), &as_map(ancestor), "students")?;
        Ok(CourseExecution {
            course_id: merge_scalar(&self.course_id, &committed.course_id, &ancestor.course_id, "course_id")?,
            students: merged.into_iter().map(|(user_id, name)| EnrolledStudent { user_id, name }).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TournamentCreator {
    pub user_id: AggregateId,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tournament {
    pub course_execution_id: AggregateId,
    pub creator: TournamentCreator,
    /// Participant user id to display name.
    pub participants: BTreeMap<AggregateId, String>,
    pub start_time: u64,
    pub end_time: u64,
    pub max_participants: usize,
    pub topics: BTreeSet<u64>,
}

impl Tournament {
    pub fn involves(&self, user_id: AggregateId) -> bool {
        self.creator.user_id == user_id || self.participants.contains_key(&user_id)
    }

    /// Sets the display name of `user_id` wherever it appears. Returns
    /// whether anything changed.
    pub fn rename_user(&mut self, user_id: AggregateId, name: &str) -> bool {
        let mut changed = false;
        if self.creator.user_id == user_id && self.creator.name != name {
            self.creator.name = name.to_string();
            changed = true;
        }
        if let Some(n) = self.participants.get_mut(&user_id) {
            if n != name {
                *n = name.to_string();
                changed = true;
            }
        }
        changed
    }
}

impl Aggregate for Tournament {
    const TYPE: &'static str = "Tournament";

    fn verify_invariants(&self) -> Result<()> {
        if self.start_time >= self.end_time {
            return Err(Error::invariant(
                "StartBeforeEnd",
                format!("start {} is not before end {}", self.start_time, self.end_time),
            ));
        }
        if self.participants.len() > self.max_participants {
            return Err(Error::invariant(
                "TournamentFull",
                format!("{} participants exceed capacity {}", self.participants.len(), self.max_participants),
            ));
        }
        Ok(())
    }

    fn event_subscriptions(&self, _self_id: AggregateId) -> Vec<(String, AggregateId)> {
        let mut subs = vec![
            (UPDATE_STUDENT_NAME_EVENT.to_string(), self.course_execution_id),
            (ANONYMIZE_USER_EVENT.to_string(), self.creator.user_id),
        ];
        subs.extend(
            self.participants
                .keys()
                .filter(|&&id| id != self.creator.user_id)
                .map(|&id| (ANONYMIZE_USER_EVENT.to_string(), id)),
        );
        subs
    }

    fn merge_fields(&self, committed: &Self, ancestor: &Self) -> Result<Self> {
        Ok(Tournament {
            course_execution_id: merge_scalar(
                &self.course_execution_id,
                &committed.course_execution_id,
                &ancestor.course_execution_id,
                "course_execution_id",
            )?,
            creator: merge_scalar(&self.creator, &committed.creator, &ancestor.creator, "creator")?,
            participants: merge_map(&self.participants, &committed.participants, &ancestor.participants, "participants")?,
            start_time: merge_scalar(&self.start_time, &committed.start_time, &ancestor.start_time, "start_time")?,
            end_time: merge_scalar(&self.end_time, &committed.end_time, &ancestor.end_time, "end_time")?,
            max_participants: merge_scalar(
                &self.max_participants,
                &committed.max_participants,
                &ancestor.max_participants,
                "max_participants",
            )?,
            topics: merge_scalar(&self.topics, &committed.topics, &ancestor.topics, "topics")?,
        })
    }
}

/// Three-way merge of one field: the side that changed wins.
pub fn merge_scalar<T: Clone + PartialEq>(local: &T, committed: &T, ancestor: &T, field: &str) -> Result<T> {
    if local == ancestor || local == committed {
        Ok(committed.clone())
    } else if committed == ancestor {
        Ok(local.clone())
    } else {
        Err(Error::MergeConflictUnresolvable(field.to_string()))
    }
}

/// Key-wise three-way merge: additions and removals from both sides apply;
/// a key changed differently by both sides is a conflict.
pub fn merge_map<K: Ord + Clone, V: Clone + PartialEq>(
    local: &BTreeMap<K, V>,
    committed: &BTreeMap<K, V>,
    ancestor: &BTreeMap<K, V>,
    field: &str,
) -> Result<BTreeMap<K, V>> {
    let keys: BTreeSet<&K> = local.keys().chain(committed.keys()).chain(ancestor.keys()).collect();
    let mut out = BTreeMap::new();
    for k in keys {
        if let Some(v) = merge_scalar(&local.get(k), &committed.get(k), &ancestor.get(k), field)? {
            out.insert(k.clone(), v.clone());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tournament(participants: &[u64]) -> Tournament {
        Tournament {
            course_execution_id: 1,
            creator: TournamentCreator { user_id: 2, name: "creator".into() },
            participants: participants.iter().map(|&p| (p, format!("p{p}"))).collect(),
            start_time: 10,
            end_time: 20,
            max_participants: 8,
            topics: BTreeSet::new(),
        }
    }

    #[test]
    fn invariants() {
        assert!(tournament(&[]).verify_invariants().is_ok());
        let mut t = tournament(&[]);
        t.end_time = 10;
        assert_eq!(t.verify_invariants().unwrap_err().invariant_name(), Some("StartBeforeEnd"));
        let full = tournament(&[1, 3, 4, 5, 6, 7, 8, 9, 10]);
        assert_eq!(full.verify_invariants().unwrap_err().invariant_name(), Some("TournamentFull"));
        let dup = CourseExecution {
            course_id: 1,
            students: vec![EnrolledStudent { user_id: 1, name: "a".into() }, EnrolledStudent { user_id: 1, name: "b".into() }],
        };
        assert!(dup.verify_invariants().is_err());
    }

    #[test]
    fn disjoint_additions_union() {
        let merged = tournament(&[1]).merge_fields(&tournament(&[2]), &tournament(&[])).unwrap();
        assert_eq!(merged.participants.keys().copied().collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn one_sided_scalar_change_wins() {
        let base = tournament(&[]);
        let mut local = base.clone();
        local.end_time = 99;
        assert_eq!(local.merge_fields(&base, &base).unwrap().end_time, 99);
        assert_eq!(base.merge_fields(&local, &base).unwrap().end_time, 99);
    }

    #[test]
    fn both_sides_changing_capacity_conflicts() {
        let base = tournament(&[]);
        let (mut a, mut b) = (base.clone(), base.clone());
        a.max_participants = 3;
        b.max_participants = 5;
        assert!(matches!(a.merge_fields(&b, &base), Err(Error::MergeConflictUnresolvable(_))));
    }

    #[test]
    fn subscriptions_cover_execution_creator_and_participants() {
        let subs = tournament(&[5, 2]).event_subscriptions(100);
        assert!(subs.contains(&(UPDATE_STUDENT_NAME_EVENT.into(), 1)));
        assert!(subs.contains(&(ANONYMIZE_USER_EVENT.into(), 2)));
        assert!(subs.contains(&(ANONYMIZE_USER_EVENT.into(), 5)));
        assert_eq!(subs.len(), 3);
    }

    proptest! {
        /// Participant merge equals the set oracle: committed plus local
        /// additions minus local removals, when the sides touch distinct users.
        #[test]
        fn participant_merge_matches_set_oracle(
            ancestor in proptest::collection::btree_set(0u64..40, 0..10),
            local_add in proptest::collection::btree_set(40u64..60, 0..5),
            committed_add in proptest::collection::btree_set(60u64..80, 0..5),
            local_drop in proptest::collection::btree_set(0u64..20, 0..5),
            committed_drop in proptest::collection::btree_set(20u64..40, 0..5),
        ) {
            let base: Vec<u64> = ancestor.iter().copied().collect();
            let mut a = tournament(&base);
            a.max_participants = 100;
            let mut l = a.clone();
            let mut c = a.clone();
            for x in &local_add { l.participants.insert(*x, format!("p{x}")); }
            for x in &local_drop { l.participants.remove(x); }
            for x in &committed_add { c.participants.insert(*x, format!("p{x}")); }
            for x in &committed_drop { c.participants.remove(x); }
            let merged = l.merge_fields(&c, &a).unwrap();
            let expected: BTreeSet<u64> = ancestor.iter()
                .chain(&local_add).chain(&committed_add).copied()
                .filter(|x| !local_drop.contains(x) && !committed_drop.contains(x))
                .collect();
            prop_assert_eq!(merged.participants.keys().copied().collect::<BTreeSet<_>>(), expected);
        }
    }
}

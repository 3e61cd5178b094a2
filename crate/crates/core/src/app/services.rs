//! Command handlers for the user, execution and tournament services.
//!
//! Handlers only talk to the unit-of-work service named by the command, so
//! the same code runs under either transactional model.

use std::collections::BTreeSet;
use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::domain::{
    CourseExecution, EnrolledStudent, Role, Tournament, TournamentCreator, User, ANONYMIZE_USER_EVENT, ANONYMOUS,
    UPDATE_STUDENT_NAME_EVENT,
};
use crate::aggregate::{AggregateId, AggregateIdGenerator, Version};
use crate::error::{Error, Result};
use crate::messaging::{Command, CommandHandler, Payload};
use crate::transaction::{PendingEvent, UnitOfWorkService, UowHandle};

pub const USER_SERVICE: &str = "user";
pub const EXECUTION_SERVICE: &str = "execution";
pub const TOURNAMENT_SERVICE: &str = "tournament";

pub const CREATE_USER: &str = "CreateUser";
pub const GET_USER: &str = "GetUser";
pub const ANONYMIZE_USER: &str = "AnonymizeUser";

pub const CREATE_EXECUTION: &str = "CreateCourseExecution";
pub const ENROLL_STUDENT: &str = "EnrollStudent";
pub const GET_STUDENT: &str = "GetStudent";
pub const UPDATE_STUDENT_NAME: &str = "UpdateStudentName";

pub const CREATE_TOURNAMENT: &str = "CreateTournament";
pub const GET_TOURNAMENT: &str = "GetTournament";
pub const ADD_PARTICIPANT: &str = "AddParticipant";
pub const REMOVE_PARTICIPANT: &str = "RemoveParticipant";
pub const UPDATE_PARTICIPANT_NAME: &str = "UpdateParticipantName";
pub const ANONYMIZE_PARTICIPANT: &str = "AnonymizeParticipant";

/// Domain error names raised by the services, beyond invariant violations.
pub const NOT_A_STUDENT: &str = "NotAStudent";
pub const STUDENT_NOT_ENROLLED: &str = "StudentNotEnrolled";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewUser {
    pub name: String,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserView {
    pub id: AggregateId,
    pub name: String,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewExecution {
    pub course_id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Enrollment {
    pub user_id: AggregateId,
    pub name: String,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentRef {
    pub user_id: AggregateId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentName {
    pub user_id: AggregateId,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewTournament {
    pub course_execution_id: AggregateId,
    pub creator: TournamentCreator,
    pub start_time: u64,
    pub end_time: u64,
    pub max_participants: usize,
    pub topics: BTreeSet<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TournamentView {
    pub id: AggregateId,
    pub version: Version,
    pub tournament: Tournament,
}

fn target(cmd: &Command) -> Result<AggregateId> {
    cmd.aggregate_id.ok_or_else(|| Error::InvalidConfig(format!("{} needs a target aggregate", cmd.command_type)))
}

fn unknown(cmd: &Command) -> Error {
    Error::InvalidConfig(format!("service {} has no command {}", cmd.target_service, cmd.command_type))
}

/// State shared by the three services.
#[derive(Clone)]
pub struct ServiceContext {
    pub uows: Arc<dyn UnitOfWorkService>,
    pub ids: Arc<AggregateIdGenerator>,
}

impl ServiceContext {
    fn uow(&self, cmd: &Command) -> Result<UowHandle> {
        let id = cmd
            .uow_ref
            .ok_or_else(|| Error::InvalidConfig(format!("{} was sent outside a unit of work", cmd.command_type)))?;
        self.uows.lookup(id)
    }
}

pub struct UserService(pub ServiceContext);

#[async_trait]
impl CommandHandler for UserService {
    async fn handle_domain_command(&self, cmd: &Command) -> Result<Payload> {
        let ctx = &self.0;
        let uow = ctx.uow(cmd)?;
        match cmd.command_type.as_str() {
            CREATE_USER => {
                let req: NewUser = cmd.payload.decode()?;
                let id = ctx.ids.new_aggregate_id();
                ctx.uows
                    .create_aggregate(&uow, id, Box::new(User { name: req.name, role: req.role, anonymized: false }))
                    .await?;
                Payload::encode(&id)
            }
            GET_USER => {
                let id = target(cmd)?;
                let rec = ctx.uows.aggregate_load(&uow, id).await?;
                let user = rec.payload::<User>()?;
                Payload::encode(&UserView { id, name: user.name.clone(), role: user.role })
            }
            ANONYMIZE_USER => {
                let id = target(cmd)?;
                let mut rec = ctx.uows.aggregate_load(&uow, id).await?;
                let user = rec.payload_mut::<User>()?;
                if user.anonymized {
                    return Ok(Payload::unit());
                }
                user.name = ANONYMOUS.to_string();
                user.anonymized = true;
                let event = PendingEvent::new(ANONYMIZE_USER_EVENT, id, serde_json::to_value(StudentRef { user_id: id })?);
                ctx.uows.register_event(&uow, event).await?;
                ctx.uows.register_changed(&uow, rec).await?;
                Ok(Payload::unit())
            }
            _ => Err(unknown(cmd)),
        }
    }
}

pub struct ExecutionService(pub ServiceContext);

#[async_trait]
impl CommandHandler for ExecutionService {
    async fn handle_domain_command(&self, cmd: &Command) -> Result<Payload> {
        let ctx = &self.0;
        let uow = ctx.uow(cmd)?;
        match cmd.command_type.as_str() {
            CREATE_EXECUTION => {
                let req: NewExecution = cmd.payload.decode()?;
                let id = ctx.ids.new_aggregate_id();
                ctx.uows
                    .create_aggregate(&uow, id, Box::new(CourseExecution { course_id: req.course_id, students: Vec::new() }))
                    .await?;
                Payload::encode(&id)
            }
            ENROLL_STUDENT => {
                let req: Enrollment = cmd.payload.decode()?;
                if req.role != Role::Student {
                    return Err(Error::domain(NOT_A_STUDENT, format!("user {} is not a student", req.user_id)));
                }
                let mut rec = ctx.uows.aggregate_load(&uow, target(cmd)?).await?;
                let exec = rec.payload_mut::<CourseExecution>()?;
                if exec.student(req.user_id).is_some() {
                    return Ok(Payload::unit());
                }
                exec.students.push(EnrolledStudent { user_id: req.user_id, name: req.name });
                ctx.uows.register_changed(&uow, rec).await?;
                Ok(Payload::unit())
            }
            GET_STUDENT => {
                let req: StudentRef = cmd.payload.decode()?;
                let exec_id = target(cmd)?;
                let rec = ctx.uows.aggregate_load(&uow, exec_id).await?;
                let student = rec.payload::<CourseExecution>()?.student(req.user_id).cloned().ok_or_else(|| {
                    Error::domain(NOT_A_STUDENT, format!("user {} is not a student of execution {exec_id}", req.user_id))
                })?;
                Payload::encode(&StudentName { user_id: student.user_id, name: student.name })
            }
            UPDATE_STUDENT_NAME => {
                let req: StudentName = cmd.payload.decode()?;
                let exec_id = target(cmd)?;
                let mut rec = ctx.uows.aggregate_load(&uow, exec_id).await?;
                let exec = rec.payload_mut::<CourseExecution>()?;
                let student = exec.students.iter_mut().find(|s| s.user_id == req.user_id).ok_or_else(|| {
                    Error::domain(STUDENT_NOT_ENROLLED, format!("user {} is not enrolled in {exec_id}", req.user_id))
                })?;
                student.name = req.name.clone();
                let event = PendingEvent::new(UPDATE_STUDENT_NAME_EVENT, exec_id, serde_json::to_value(&req)?);
                ctx.uows.register_event(&uow, event).await?;
                ctx.uows.register_changed(&uow, rec).await?;
                Ok(Payload::unit())
            }
            _ => Err(unknown(cmd)),
        }
    }
}

pub struct TournamentService(pub ServiceContext);

impl TournamentService {
    /// Loads, applies `edit`, and registers the result if `edit` reports a change.
    async fn modify(
        &self,
        uow: &UowHandle,
        id: AggregateId,
        edit: impl FnOnce(&mut Tournament) -> bool,
    ) -> Result<Payload> {
        let ctx = &self.0;
        let mut rec = ctx.uows.aggregate_load(uow, id).await?;
        if edit(rec.payload_mut::<Tournament>()?) {
            ctx.uows.register_changed(uow, rec).await?;
        }
        Ok(Payload::unit())
    }
}

#[async_trait]
impl CommandHandler for TournamentService {
    async fn handle_domain_command(&self, cmd: &Command) -> Result<Payload> {
        let ctx = &self.0;
        let uow = ctx.uow(cmd)?;
        match cmd.command_type.as_str() {
            CREATE_TOURNAMENT => {
                let req: NewTournament = cmd.payload.decode()?;
                let id = ctx.ids.new_aggregate_id();
                let t = Tournament {
                    course_execution_id: req.course_execution_id,
                    creator: req.creator,
                    participants: Default::default(),
                    start_time: req.start_time,
                    end_time: req.end_time,
                    max_participants: req.max_participants,
                    topics: req.topics,
                };
                ctx.uows.create_aggregate(&uow, id, Box::new(t)).await?;
                Payload::encode(&id)
            }
            GET_TOURNAMENT => {
                let id = target(cmd)?;
                let rec = ctx.uows.aggregate_load(&uow, id).await?;
                let version = rec.prev_version.unwrap_or(rec.version);
                Payload::encode(&TournamentView { id, version, tournament: rec.payload::<Tournament>()?.clone() })
            }
            ADD_PARTICIPANT => {
                let req: StudentName = cmd.payload.decode()?;
                self.modify(&uow, target(cmd)?, |t| t.participants.insert(req.user_id, req.name.clone()).as_ref() != Some(&req.name))
                    .await
            }
            REMOVE_PARTICIPANT => {
                let req: StudentRef = cmd.payload.decode()?;
                self.modify(&uow, target(cmd)?, |t| t.participants.remove(&req.user_id).is_some()).await
            }
            UPDATE_PARTICIPANT_NAME => {
                let req: StudentName = cmd.payload.decode()?;
                self.modify(&uow, target(cmd)?, |t| t.rename_user(req.user_id, &req.name)).await
            }
            ANONYMIZE_PARTICIPANT => {
                let req: StudentRef = cmd.payload.decode()?;
                self.modify(&uow, target(cmd)?, |t| t.rename_user(req.user_id, ANONYMOUS)).await
            }
            _ => Err(unknown(cmd)),
        }
    }
}

//! Quizzes sample application: users, course executions and tournaments.
//!
//! Functionalities are workflows over the three services. The same workflow
//! definitions run under sagas and causal units of work; only the envelope a
//! command carries differs, and it is chosen from the installed model.

pub mod domain;
pub mod services;

use std::collections::BTreeSet;
use std::sync::{Arc, Weak};

use async_trait::async_trait;
use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::Serialize;

pub use domain::{CourseExecution, Role, Tournament, TournamentCreator, User, ANONYMOUS};
pub use services::{TournamentView, UserView};

use crate::aggregate::{Aggregate, AggregateId, AggregateIdGenerator, SagaState};
use crate::coordination::{Step, StepContext, Workflow, WorkflowRuntime};
use crate::error::{Error, Result};
use crate::messaging::{Command, CommandGateway, CommandHandlerDecorator, Payload};
use crate::notification::{DomainEvent, EventHandler, NotificationService};
use crate::transaction::{TransactionModel, UnitOfWorkService};
use domain::{ANONYMIZE_USER_EVENT, UPDATE_STUDENT_NAME_EVENT};
use services::*;

pub const IN_UPDATE_TOURNAMENT: &str = "IN_UPDATE_TOURNAMENT";

/// Framework pieces the application is installed into.
#[derive(Clone)]
pub struct AppEnvironment {
    pub gateway: CommandGateway,
    pub uows: Arc<dyn UnitOfWorkService>,
    pub runtime: WorkflowRuntime,
    pub notifications: Arc<NotificationService>,
    /// Applied, in order, around every service handler.
    pub decorators: Vec<Arc<dyn CommandHandlerDecorator>>,
}

pub type Slot<T> = Arc<Mutex<Option<T>>>;

fn slot<T>() -> Slot<T> {
    Arc::new(Mutex::new(None))
}

fn take<T>(slot: &Slot<T>, what: &str) -> Result<T> {
    slot.lock().take().ok_or_else(|| Error::InvalidConfig(format!("{what} was not produced")))
}

fn peek<T: Clone>(slot: &Slot<T>, what: &str) -> Result<T> {
    slot.lock().clone().ok_or_else(|| Error::InvalidConfig(format!("{what} is not available yet")))
}

struct AppInner {
    gateway: CommandGateway,
    uows: Arc<dyn UnitOfWorkService>,
    runtime: WorkflowRuntime,
    notifications: Arc<NotificationService>,
}

/// One request to a service, wrapped in the envelope of the active model.
struct Request {
    service: &'static str,
    command_type: &'static str,
    target: Option<AggregateId>,
    payload: Payload,
    lock: bool,
}

impl Request {
    fn new(service: &'static str, command_type: &'static str, payload: &impl Serialize) -> Result<Self> {
        Ok(Request { service, command_type, target: None, payload: Payload::encode(payload)?, lock: false })
    }

    fn on(mut self, id: AggregateId) -> Self {
        self.target = Some(id);
        self
    }

    /// Saga only: take the tournament update lock on the target.
    fn locking(mut self) -> Self {
        self.lock = true;
        self
    }
}

impl AppInner {
    async fn send(&self, ctx: &StepContext, req: Request) -> Result<Payload> {
        let (uow_id, snapshot) = {
            let u = ctx.uow.lock();
            (u.id, u.snapshot_version)
        };
        let mut cmd = Command::new(req.service, req.command_type, req.payload).in_uow(uow_id).with_trace(ctx.trace);
        if let Some(id) = req.target {
            cmd = cmd.for_aggregate(id);
        }
        cmd = match self.uows.model() {
            TransactionModel::Saga if req.lock => {
                let state = SagaState::new(IN_UPDATE_TOURNAMENT);
                cmd.saga(vec![state.clone()], state)
            }
            TransactionModel::Saga => cmd,
            TransactionModel::Causal => cmd.causal(snapshot, uow_id),
        };
        self.gateway.send(cmd).await
    }

    /// A step that sends one request and optionally stores the decoded reply.
    fn step<T, F>(self: &Arc<Self>, name: &str, out: Option<Slot<T>>, make: F) -> Step
    where
        T: DeserializeOwned + Send + 'static,
        F: Fn() -> Result<Request> + Send + Sync + 'static,
    {
        let app = self.clone();
        let make = Arc::new(make);
        Step::new(name, move |ctx| {
            let (app, make, out) = (app.clone(), make.clone(), out.clone());
            async move {
                let reply = app.send(&ctx, make()?).await?;
                if let Some(out) = out {
                    *out.lock() = Some(reply.decode::<T>()?);
                }
                Ok(())
            }
        })
    }

    async fn run(&self, functionality: &str, steps: Vec<Step>) -> Result<()> {
        let mut wf = Workflow::build(&self.runtime, functionality, steps).await?;
        wf.execute().await
    }

    async fn single<T: DeserializeOwned + Send + 'static>(
        self: &Arc<Self>,
        functionality: &str,
        step: &str,
        req: impl Fn() -> Result<Request> + Send + Sync + 'static,
    ) -> Result<T> {
        let out = slot();
        self.run(functionality, vec![self.step(step, Some(out.clone()), req)]).await?;
        take(&out, step)
    }

    async fn single_unit(
        self: &Arc<Self>,
        functionality: &str,
        step: &str,
        req: impl Fn() -> Result<Request> + Send + Sync + 'static,
    ) -> Result<()> {
        self.run(functionality, vec![self.step::<(), _>(step, None, req)]).await
    }

    async fn update_participant_name(self: &Arc<Self>, tournament_id: AggregateId, user_id: AggregateId, name: String) -> Result<()> {
        self.single_unit("updateParticipantName", "updateParticipantNameStep", move || {
            Ok(Request::new(TOURNAMENT_SERVICE, UPDATE_PARTICIPANT_NAME, &StudentName { user_id, name: name.clone() })?
                .on(tournament_id))
        })
        .await
    }

    async fn anonymize_participant(self: &Arc<Self>, tournament_id: AggregateId, user_id: AggregateId) -> Result<()> {
        self.single_unit("anonymizeParticipant", "anonymizeParticipantStep", move || {
            Ok(Request::new(TOURNAMENT_SERVICE, ANONYMIZE_PARTICIPANT, &StudentRef { user_id })?.on(tournament_id))
        })
        .await
    }
}

/// Reacts to upstream events by running the tournament's own functionalities.
struct TournamentEventHandler {
    app: Weak<AppInner>,
}

#[async_trait]
impl EventHandler for TournamentEventHandler {
    async fn handle_event(&self, subscriber: AggregateId, event: &DomainEvent) -> Result<()> {
        let app = self.app.upgrade().ok_or_else(|| Error::InvalidConfig("application was shut down".into()))?;
        match event.event_type.as_str() {
            UPDATE_STUDENT_NAME_EVENT => {
                let e: StudentName = serde_json::from_value(event.payload.clone())?;
                app.update_participant_name(subscriber, e.user_id, e.name).await
            }
            ANONYMIZE_USER_EVENT => {
                let e: StudentRef = serde_json::from_value(event.payload.clone())?;
                app.anonymize_participant(subscriber, e.user_id).await
            }
            other => Err(Error::InvalidConfig(format!("tournaments do not handle {other}"))),
        }
    }
}

/// Ids created by [`QuizzesApp::seed_course`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeededCourse {
    pub execution: AggregateId,
    pub creator: AggregateId,
    pub tournament: AggregateId,
    /// Enrolled students other than the creator, not yet participants.
    pub students: Vec<AggregateId>,
}

/// The installed application. Cloning shares the same services.
#[derive(Clone)]
pub struct QuizzesApp {
    inner: Arc<AppInner>,
}

impl QuizzesApp {
    /// Registers the services and event handlers with the framework.
    pub fn install(env: AppEnvironment) -> Result<Self> {
        let errors = env.gateway.errors();
        errors.register_domain(NOT_A_STUDENT);
        errors.register_domain(STUDENT_NOT_ENROLLED);
        let ctx = ServiceContext { uows: env.uows.clone(), ids: Arc::new(AggregateIdGenerator::default()) };
        env.gateway.register_handler(USER_SERVICE, Arc::new(UserService(ctx.clone())), env.decorators.clone())?;
        env.gateway.register_handler(EXECUTION_SERVICE, Arc::new(ExecutionService(ctx.clone())), env.decorators.clone())?;
        env.gateway.register_handler(TOURNAMENT_SERVICE, Arc::new(TournamentService(ctx)), env.decorators.clone())?;
        let inner = Arc::new(AppInner {
            gateway: env.gateway,
            uows: env.uows,
            runtime: env.runtime,
            notifications: env.notifications,
        });
        let handler = Arc::new(TournamentEventHandler { app: Arc::downgrade(&inner) });
        for event in [UPDATE_STUDENT_NAME_EVENT, ANONYMIZE_USER_EVENT] {
            inner.notifications.register_event_handler(Tournament::TYPE, event, handler.clone());
        }
        Ok(QuizzesApp { inner })
    }

    pub fn model(&self) -> TransactionModel {
        self.inner.uows.model()
    }

    pub fn notifications(&self) -> &Arc<NotificationService> {
        &self.inner.notifications
    }

    pub fn runtime(&self) -> &WorkflowRuntime {
        &self.inner.runtime
    }

    /// One publish pass followed by one tournament handling pass. Returns
    /// the number of events handled.
    pub async fn process_events(&self) -> usize {
        self.inner.notifications.publish_pending().await;
        self.inner.notifications.run_event_handling_cycle(Tournament::TYPE).await
    }

    pub async fn create_user(&self, name: &str, role: Role) -> Result<AggregateId> {
        let req = NewUser { name: name.to_string(), role };
        self.inner
            .single("createUser", "createUserStep", move || Request::new(USER_SERVICE, CREATE_USER, &req))
            .await
    }

    pub async fn create_course_execution(&self, course_id: u64) -> Result<AggregateId> {
        self.inner
            .single("createCourseExecution", "createCourseExecutionStep", move || {
                Request::new(EXECUTION_SERVICE, CREATE_EXECUTION, &NewExecution { course_id })
            })
            .await
    }

    pub async fn enroll_student(&self, execution_id: AggregateId, user_id: AggregateId) -> Result<()> {
        let app = &self.inner;
        let user = slot::<UserView>();
        let u = user.clone();
        let steps = vec![
            app.step("getUserStep", Some(user.clone()), move || Ok(Request::new(USER_SERVICE, GET_USER, &())?.on(user_id))),
            app.step::<(), _>("enrollStudentStep", None, move || {
                let user = peek(&u, "user")?;
                Ok(Request::new(EXECUTION_SERVICE, ENROLL_STUDENT, &Enrollment { user_id, name: user.name, role: user.role })?
                    .on(execution_id))
            })
            .after(&["getUserStep"]),
        ];
        app.run("enrollStudent", steps).await
    }

    pub async fn create_tournament(
        &self,
        execution_id: AggregateId,
        creator_id: AggregateId,
        start_time: u64,
        end_time: u64,
        max_participants: usize,
        topics: BTreeSet<u64>,
    ) -> Result<AggregateId> {
        let app = &self.inner;
        let creator = slot::<StudentName>();
        let id = slot::<AggregateId>();
        let c = creator.clone();
        let steps = vec![
            app.step("getCreatorStep", Some(creator), move || {
                Ok(Request::new(EXECUTION_SERVICE, GET_STUDENT, &StudentRef { user_id: creator_id })?.on(execution_id))
            }),
            app.step("createTournamentStep", Some(id.clone()), move || {
                let creator = peek(&c, "creator")?;
                Request::new(
                    TOURNAMENT_SERVICE,
                    CREATE_TOURNAMENT,
                    &NewTournament {
                        course_execution_id: execution_id,
                        creator: TournamentCreator { user_id: creator.user_id, name: creator.name },
                        start_time,
                        end_time,
                        max_participants,
                        topics: topics.clone(),
                    },
                )
            })
            .after(&["getCreatorStep"]),
        ];
        app.run("createTournament", steps).await?;
        take(&id, "tournament id")
    }

    /// Builds the read-only tournament query without running it. The view
    /// lands in the returned slot once the workflow has run.
    pub async fn build_get_tournament_by_id(&self, tournament_id: AggregateId) -> Result<(Workflow, Slot<TournamentView>)> {
        let out = slot();
        let step = self.inner.step("getTournamentStep", Some(out.clone()), move || {
            Ok(Request::new(TOURNAMENT_SERVICE, GET_TOURNAMENT, &())?.on(tournament_id))
        });
        Ok((Workflow::build(&self.inner.runtime, "getTournamentById", vec![step]).await?, out))
    }

    pub async fn get_tournament_by_id(&self, tournament_id: AggregateId) -> Result<TournamentView> {
        let (mut wf, out) = self.build_get_tournament_by_id(tournament_id).await?;
        wf.execute().await?;
        take(&out, "tournament view")
    }

    /// Renames an enrolled student; tournaments follow through events.
    pub async fn update_student_name(&self, execution_id: AggregateId, user_id: AggregateId, name: &str) -> Result<()> {
        let name = name.to_string();
        self.inner
            .single_unit("updateStudentName", "updateStudentNameStep", move || {
                Ok(Request::new(EXECUTION_SERVICE, UPDATE_STUDENT_NAME, &StudentName { user_id, name: name.clone() })?
                    .on(execution_id))
            })
            .await
    }

    /// Builds the two-step participant addition without running it.
    pub async fn build_add_participant(
        &self,
        tournament_id: AggregateId,
        execution_id: AggregateId,
        user_id: AggregateId,
    ) -> Result<Workflow> {
        let app = &self.inner;
        let student = slot::<StudentName>();
        let s = student.clone();
        let compensator = app.clone();
        let steps = vec![
            app.step("getUserStep", Some(student), move || {
                Ok(Request::new(EXECUTION_SERVICE, GET_STUDENT, &StudentRef { user_id })?.on(execution_id))
            }),
            app.step::<(), _>("addParticipantStep", None, move || {
                Ok(Request::new(TOURNAMENT_SERVICE, ADD_PARTICIPANT, &peek(&s, "student")?)?.on(tournament_id).locking())
            })
            .after(&["getUserStep"])
            .with_compensation(move |ctx| {
                let app = compensator.clone();
                async move {
                    let req = Request::new(TOURNAMENT_SERVICE, REMOVE_PARTICIPANT, &StudentRef { user_id })?;
                    app.send(&ctx, req.on(tournament_id).locking()).await.map(|_| ())
                }
            }),
        ];
        Workflow::build(&app.runtime, "addParticipant", steps).await
    }

    pub async fn add_participant(&self, tournament_id: AggregateId, execution_id: AggregateId, user_id: AggregateId) -> Result<()> {
        self.build_add_participant(tournament_id, execution_id, user_id).await?.execute().await
    }

    /// Replaces the user's name with the anonymization token; tournaments
    /// follow through events.
    pub async fn anonymize_user_in_tournaments(&self, user_id: AggregateId) -> Result<()> {
        self.inner
            .single_unit("anonymizeUserInTournaments", "anonymizeUserStep", move || {
                Ok(Request::new(USER_SERVICE, ANONYMIZE_USER, &())?.on(user_id))
            })
            .await
    }

    pub async fn update_participant_name(&self, tournament_id: AggregateId, user_id: AggregateId, name: &str) -> Result<()> {
        self.inner.update_participant_name(tournament_id, user_id, name.to_string()).await
    }

    pub async fn anonymize_participant(&self, tournament_id: AggregateId, user_id: AggregateId) -> Result<()> {
        self.inner.anonymize_participant(tournament_id, user_id).await
    }

    /// Creates one execution with `students + 1` enrolled students, the
    /// first of whom creates an empty tournament of the given capacity.
    pub async fn seed_course(&self, students: usize, capacity: usize) -> Result<SeededCourse> {
        let execution = self.create_course_execution(1).await?;
        let creator = self.create_user("creator", Role::Student).await?;
        self.enroll_student(execution, creator).await?;
        let tournament = self.create_tournament(execution, creator, 1, 2, capacity, BTreeSet::new()).await?;
        let mut ids = Vec::with_capacity(students);
        for i in 0..students {
            let id = self.create_user(&format!("student-{i}"), Role::Student).await?;
            self.enroll_student(execution, id).await?;
            ids.push(id);
        }
        Ok(SeededCourse { execution, creator, tournament, students: ids })
    }
}

//! Runs one untrusted command with a wall-clock limit, capped output, its
//! own process group and (where the kernel allows) no network.

use std::io::{self, Read};
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::Path;
use std::process::{Child, Command, ExitStatus, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::thread;
use std::time::{Duration, Instant};

const POLL: Duration = Duration::from_millis(5);
/// Largest file a test may write.
const FILE_SIZE_LIMIT: u64 = 64 << 20;

#[derive(Debug, Clone)]
pub struct RunSpec<'a> {
    pub argv: &'a [String],
    pub cwd: &'a Path,
    pub timeout: Duration,
    /// Per-stream cap; exceeding it kills the process.
    pub max_output_bytes: u64,
    pub isolate_network: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub status: ExitStatus,
    pub timed_out: bool,
    pub output_exceeded: bool,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub wall: Duration,
}

impl RunOutcome {
    pub fn success(&self) -> bool {
        !self.timed_out && !self.output_exceeded && self.status.success()
    }

    pub fn signaled(&self) -> bool {
        self.status.signal().is_some()
    }

    pub fn stderr_text(&self) -> String {
        String::from_utf8_lossy(&self.stderr).into_owned()
    }
}

fn kill_group(pid: u32) {
    // SAFETY: signalling a process group we created; failure just means it is gone.
    unsafe {
        libc::kill(-(pid as libc::pid_t), libc::SIGKILL);
    }
}

fn set_limit(resource: libc::__rlimit_resource_t, value: u64) -> io::Result<()> {
    let lim = libc::rlimit {
        rlim_cur: value as libc::rlim_t,
        rlim_max: value as libc::rlim_t,
    };
    // SAFETY: plain syscall on a stack value.
    if unsafe { libc::setrlimit(resource, &lim) } != 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(())
}

fn enter_network_namespace() -> io::Result<()> {
    // SAFETY: unshare only affects the calling (child) process.
    if unsafe { libc::unshare(libc::CLONE_NEWNET) } == 0 {
        return Ok(());
    }
    // Unprivileged fallback: a user namespace grants the capability.
    if unsafe { libc::unshare(libc::CLONE_NEWUSER | libc::CLONE_NEWNET) } == 0 {
        return Ok(());
    }
    Err(io::Error::last_os_error())
}

fn reader<R: Read + Send + 'static>(
    mut stream: R,
    cap: u64,
    exceeded: Arc<AtomicBool>,
    pid: u32,
    tx: mpsc::Sender<(bool, Vec<u8>)>,
    is_stdout: bool,
) {
    thread::spawn(move || {
        let mut kept = Vec::new();
        let mut total: u64 = 0;
        let mut buf = [0u8; 16 * 1024];
        loop {
            match stream.read(&mut buf) {
                Ok(0) => break,
                Ok(n) => {
                    total += n as u64;
                    let room = cap.saturating_sub(kept.len() as u64) as usize;
                    kept.extend_from_slice(&buf[..n.min(room)]);
                    if total > cap {
                        exceeded.store(true, Ordering::SeqCst);
                        kill_group(pid);
                        break;
                    }
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(_) => break,
            }
        }
        let _ = tx.send((is_stdout, kept));
    });
}

fn spawn(spec: &RunSpec<'_>) -> io::Result<Child> {
    let (program, args) = spec
        .argv
        .split_first()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "empty command"))?;
    let mut cmd = Command::new(program);
    cmd.args(args)
        .current_dir(spec.cwd)
        .env_clear()
        .env("PATH", std::env::var_os("PATH").unwrap_or_else(|| "/usr/bin:/bin".into()))
        .env("HOME", spec.cwd)
        .env("TMPDIR", spec.cwd)
        .env("LANG", "C.UTF-8")
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    let cpu = spec.timeout.as_secs() + 2;
    let isolate = spec.isolate_network;
    // SAFETY: the hook only makes async-signal-safe syscalls.
    unsafe {
        cmd.pre_exec(move || {
            if libc::setsid() < 0 {
                return Err(io::Error::last_os_error());
            }
            set_limit(libc::RLIMIT_CPU, cpu)?;
            set_limit(libc::RLIMIT_FSIZE, FILE_SIZE_LIMIT)?;
            set_limit(libc::RLIMIT_CORE, 0)?;
            if isolate {
                enter_network_namespace()?;
            }
            Ok(())
        });
    }
    cmd.spawn()
}

/// Runs the command to completion or until a limit trips. Errors only when
/// the process cannot be started.
pub fn run(spec: &RunSpec<'_>) -> io::Result<RunOutcome> {
    let start = Instant::now();
    let mut child = spawn(spec)?;
    let pid = child.id();
    let exceeded = Arc::new(AtomicBool::new(false));
    let (tx, rx) = mpsc::channel();
    reader(child.stdout.take().expect("piped"), spec.max_output_bytes, exceeded.clone(), pid, tx.clone(), true);
    reader(child.stderr.take().expect("piped"), spec.max_output_bytes, exceeded.clone(), pid, tx, false);

    let mut timed_out = false;
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if start.elapsed() >= spec.timeout {
            timed_out = true;
            kill_group(pid);
            break child.wait()?;
        }
        thread::sleep(POLL);
    };
    // Reap anything the test left running in its group.
    kill_group(pid);
    let wall = start.elapsed();

    let mut stdout = Vec::new();
    let mut stderr = Vec::new();
    // A descendant that escaped the group may hold the pipes open; do not
    // wait on it forever.
    let deadline = Instant::now() + Duration::from_secs(2);
    for _ in 0..2 {
        let left = deadline.saturating_duration_since(Instant::now());
        match rx.recv_timeout(left) {
            Ok((true, bytes)) => stdout = bytes,
            Ok((false, bytes)) => stderr = bytes,
            Err(_) => break,
        }
    }
    let output_exceeded = exceeded.load(Ordering::SeqCst);
    Ok(RunOutcome {
        status,
        timed_out,
        output_exceeded,
        stdout,
        stderr,
        wall,
    })
}

/// Checks once whether network namespaces can be created here.
pub fn network_isolation_available() -> bool {
    let argv = ["true".to_string()];
    let spec = RunSpec {
        argv: &argv,
        cwd: Path::new("/"),
        timeout: Duration::from_secs(5),
        max_output_bytes: 1024,
        isolate_network: true,
    };
    run(&spec).is_ok_and(|o| o.success())
}

//! Capability channels: framed request/response messages with descriptors
//! passed alongside.
//!
//! The native transport is a connected `AF_UNIX` stream socket; descriptors
//! travel as `SCM_RIGHTS` ancillary data on the first byte of a frame. The
//! simulation transport is a pair of in-process queues carrying the same
//! encoded frames plus owned descriptors.

use std::io::{self, IoSlice, IoSliceMut, Read};
use std::os::fd::{AsFd, AsRawFd, BorrowedFd, FromRawFd, IntoRawFd, OwnedFd, RawFd};
use std::os::unix::net::UnixStream;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use capexec_core::wire::{frame_len, HEADER_BYTES, MAX_FRAME_BYTES};
use capexec_core::{decode_message, encode_message, ChannelMessage, MessageKind, WireError};
use nix::errno::Errno;
use nix::sys::socket::{recvmsg, sendmsg, ControlMessage, ControlMessageOwned, MsgFlags};

/// Brokers are local; a reply slower than this means the peer is stuck.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(5);

/// Most descriptors one frame may carry.
pub const MAX_FDS_PER_FRAME: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum ChannelError {
    #[error("channel closed by peer")]
    Closed,
    #[error("timed out waiting for a reply")]
    Timeout,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("malformed frame: {0}")]
    Wire(#[from] WireError),
    #[error("channel I/O: {0}")]
    Io(io::Error),
}

impl From<io::Error> for ChannelError {
    fn from(err: io::Error) -> Self {
        match err.kind() {
            io::ErrorKind::UnexpectedEof
            | io::ErrorKind::BrokenPipe
            | io::ErrorKind::ConnectionReset
            | io::ErrorKind::ConnectionAborted => ChannelError::Closed,
            io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => ChannelError::Timeout,
            _ => ChannelError::Io(err),
        }
    }
}

impl From<Errno> for ChannelError {
    fn from(errno: Errno) -> Self {
        ChannelError::from(io::Error::from(errno))
    }
}

struct Packet {
    bytes: Vec<u8>,
    fds: Vec<OwnedFd>,
}

enum Transport {
    Unix(UnixStream),
    Sim { tx: Sender<Packet>, rx: Receiver<Packet> },
}

/// A message together with the descriptors that arrived with it.
#[derive(Debug)]
pub struct Received {
    pub message: ChannelMessage,
    fds: Vec<Option<OwnedFd>>,
}

impl Received {
    /// Takes ownership of the descriptor referenced by attr `name`.
    pub fn take_descriptor(&mut self, name: &str) -> Option<OwnedFd> {
        let index = self.message.get_descriptor(name)?.0 as usize;
        self.fds.get_mut(index)?.take()
    }
}

pub struct Channel {
    transport: Transport,
    next_sequence: u64,
}

impl std::fmt::Debug for Channel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.transport {
            Transport::Unix(s) => write!(f, "Channel(unix fd {})", s.as_raw_fd()),
            Transport::Sim { .. } => f.write_str("Channel(sim)"),
        }
    }
}

impl Channel {
    pub fn unix_pair() -> io::Result<(Channel, Channel)> {
        let (a, b) = UnixStream::pair()?;
        Ok((Channel::from_unix(a), Channel::from_unix(b)))
    }

    pub fn sim_pair() -> (Channel, Channel) {
        let (tx_a, rx_b) = mpsc::channel();
        let (tx_b, rx_a) = mpsc::channel();
        let a = Channel { transport: Transport::Sim { tx: tx_a, rx: rx_a }, next_sequence: 1 };
        let b = Channel { transport: Transport::Sim { tx: tx_b, rx: rx_b }, next_sequence: 1 };
        (a, b)
    }

    pub fn from_unix(stream: UnixStream) -> Channel {
        Channel { transport: Transport::Unix(stream), next_sequence: 1 }
    }

    /// Adopts an inherited socket descriptor.
    ///
    /// # Safety
    /// `fd` must be an open stream socket owned by nobody else.
    pub unsafe fn from_raw_fd(fd: RawFd) -> Channel {
        Channel::from_unix(UnixStream::from_raw_fd(fd))
    }

    pub fn is_native(&self) -> bool {
        matches!(self.transport, Transport::Unix(_))
    }

    pub fn as_raw_fd(&self) -> Option<RawFd> {
        match &self.transport {
            Transport::Unix(s) => Some(s.as_raw_fd()),
            Transport::Sim { .. } => None,
        }
    }

    pub fn into_raw_fd(self) -> Option<RawFd> {
        match self.transport {
            Transport::Unix(s) => Some(s.into_raw_fd()),
            Transport::Sim { .. } => None,
        }
    }

    pub fn next_sequence(&mut self) -> u64 {
        let seq = self.next_sequence;
        self.next_sequence += 1;
        seq
    }

    pub fn send(&mut self, msg: &ChannelMessage, fds: &[BorrowedFd<'_>]) -> Result<(), ChannelError> {
        if fds.len() > MAX_FDS_PER_FRAME {
            return Err(ChannelError::Protocol(format!("{} descriptors in one frame", fds.len())));
        }
        if let Some(bad) = msg.descriptors().find(|d| d.0 as usize >= fds.len()) {
            return Err(ChannelError::Protocol(format!("descriptor ref {} has no descriptor", bad.0)));
        }
        let bytes = encode_message(msg)?;
        match &mut self.transport {
            Transport::Unix(stream) => send_unix(stream, &bytes, fds),
            Transport::Sim { tx, .. } => {
                let fds = fds.iter().map(|fd| fd.try_clone_to_owned()).collect::<io::Result<_>>()?;
                tx.send(Packet { bytes, fds }).map_err(|_| ChannelError::Closed)
            }
        }
    }

    /// Waits for the next message; `None` waits forever.
    pub fn recv(&mut self, timeout: Option<Duration>) -> Result<Received, ChannelError> {
        let packet = match &mut self.transport {
            Transport::Unix(stream) => {
                stream.set_read_timeout(timeout)?;
                recv_unix(stream)?
            }
            Transport::Sim { rx, .. } => match timeout {
                Some(t) => rx.recv_timeout(t).map_err(|e| match e {
                    RecvTimeoutError::Timeout => ChannelError::Timeout,
                    RecvTimeoutError::Disconnected => ChannelError::Closed,
                })?,
                None => rx.recv().map_err(|_| ChannelError::Closed)?,
            },
        };
        let message = decode_message(&packet.bytes)?;
        Ok(Received { message, fds: packet.fds.into_iter().map(Some).collect() })
    }

    /// Sends `req` and waits for its reply. Only one request may be
    /// outstanding, so any reply with another sequence number is an error.
    pub fn call(&mut self, req: &ChannelMessage, timeout: Duration) -> Result<Received, ChannelError> {
        if req.kind != MessageKind::Request {
            return Err(ChannelError::Protocol("call with a response message".into()));
        }
        self.send(req, &[])?;
        let reply = self.recv(Some(timeout))?;
        if reply.message.kind != MessageKind::Response {
            return Err(ChannelError::Protocol("request received where a reply was expected".into()));
        }
        if reply.message.sequence != req.sequence {
            return Err(ChannelError::Protocol(format!(
                "reply sequence {} does not answer request {}",
                reply.message.sequence, req.sequence
            )));
        }
        Ok(reply)
    }
}

fn send_unix(stream: &mut UnixStream, bytes: &[u8], fds: &[BorrowedFd<'_>]) -> Result<(), ChannelError> {
    let raw: Vec<RawFd> = fds.iter().map(|fd| fd.as_raw_fd()).collect();
    let mut sent = 0;
    while sent < bytes.len() {
        let rights = [ControlMessage::ScmRights(&raw)];
        let cmsgs: &[ControlMessage] = if sent == 0 && !raw.is_empty() { &rights } else { &[] };
        let iov = [IoSlice::new(&bytes[sent..])];
        match sendmsg::<()>(stream.as_fd().as_raw_fd(), &iov, cmsgs, MsgFlags::MSG_NOSIGNAL, None) {
            Ok(n) => sent += n,
            Err(Errno::EINTR) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

fn recv_unix(stream: &mut UnixStream) -> Result<Packet, ChannelError> {
    let mut prefix = [0u8; 4];
    let mut got = 0;
    let mut fds = Vec::new();
    let fd = stream.as_raw_fd();
    while got < prefix.len() {
        let mut cmsg = nix::cmsg_space!([RawFd; MAX_FDS_PER_FRAME]);
        let mut iov = [IoSliceMut::new(&mut prefix[got..])];
        let msg = match recvmsg::<()>(fd, &mut iov, Some(&mut cmsg), MsgFlags::MSG_CMSG_CLOEXEC) {
            Ok(m) => m,
            Err(Errno::EINTR) => continue,
            Err(e) => return Err(e.into()),
        };
        if msg.bytes == 0 {
            return Err(ChannelError::Closed);
        }
        for c in msg.cmsgs()? {
            if let ControlMessageOwned::ScmRights(raw) = c {
                // SAFETY: the kernel just installed these descriptors for us.
                fds.extend(raw.into_iter().map(|r| unsafe { OwnedFd::from_raw_fd(r) }));
            }
        }
        got += msg.bytes;
    }
    let total = frame_len(prefix);
    if !(HEADER_BYTES..=MAX_FRAME_BYTES).contains(&total) {
        return Err(ChannelError::Wire(WireError::MessageTooLarge { size: total }));
    }
    let mut bytes = vec![0u8; total];
    bytes[..4].copy_from_slice(&prefix);
    stream.read_exact(&mut bytes[4..])?;
    Ok(Packet { bytes, fds })
}

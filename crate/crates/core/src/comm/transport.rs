//! Two interchangeable byte transports carrying whole frames: in-process
//! channels and TCP sockets.

use std::io::{ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use super::wire::{decode, decode_header, encode, RoundMessage, HEADER_BYTES, TRAILER_BYTES};
use super::CommError;

pub trait FrameSink: Send {
    fn send_frame(&mut self, frame: Vec<u8>) -> Result<(), CommError>;
}

pub trait FrameSource: Send {
    /// Blocks for the next complete frame, or until `timeout` elapses.
    fn recv_frame(&mut self, timeout: Option<Duration>) -> Result<Vec<u8>, CommError>;
}

pub struct MessageSender {
    sink: Box<dyn FrameSink>,
}

impl MessageSender {
    pub fn send(&mut self, msg: &RoundMessage) -> Result<(), CommError> {
        self.sink.send_frame(encode(msg))
    }
}

pub struct MessageReceiver {
    source: Box<dyn FrameSource>,
}

impl MessageReceiver {
    pub fn recv(&mut self, timeout: Option<Duration>) -> Result<RoundMessage, CommError> {
        let frame = self.source.recv_frame(timeout)?;
        decode(&frame)
    }
}

/// One bidirectional link between the server and a client.
pub struct Connection {
    pub sender: MessageSender,
    pub receiver: MessageReceiver,
}

impl Connection {
    pub fn new(sink: Box<dyn FrameSink>, source: Box<dyn FrameSource>) -> Self {
        Self {
            sender: MessageSender { sink },
            receiver: MessageReceiver { source },
        }
    }

    pub fn send(&mut self, msg: &RoundMessage) -> Result<(), CommError> {
        self.sender.send(msg)
    }

    pub fn recv(&mut self, timeout: Option<Duration>) -> Result<RoundMessage, CommError> {
        self.receiver.recv(timeout)
    }

    pub fn split(self) -> (MessageSender, MessageReceiver) {
        (self.sender, self.receiver)
    }
}

/// Server side of a transport: yields one connection per joining client.
pub trait Acceptor {
    fn accept(&mut self) -> Result<Connection, CommError>;
}

struct ChannelSink(Sender<Vec<u8>>);

impl FrameSink for ChannelSink {
    fn send_frame(&mut self, frame: Vec<u8>) -> Result<(), CommError> {
        self.0.send(frame).map_err(|_| CommError::Disconnected)
    }
}

struct ChannelSource(Receiver<Vec<u8>>);

impl FrameSource for ChannelSource {
    fn recv_frame(&mut self, timeout: Option<Duration>) -> Result<Vec<u8>, CommError> {
        match timeout {
            None => self.0.recv().map_err(|_| CommError::Disconnected),
            Some(t) => self.0.recv_timeout(t).map_err(|e| match e {
                RecvTimeoutError::Timeout => CommError::Timeout,
                RecvTimeoutError::Disconnected => CommError::Disconnected,
            }),
        }
    }
}

/// A connected pair of in-process endpoints.
pub fn channel_pair() -> (Connection, Connection) {
    let (a_tx, a_rx) = mpsc::channel();
    let (b_tx, b_rx) = mpsc::channel();
    (
        Connection::new(Box::new(ChannelSink(a_tx)), Box::new(ChannelSource(b_rx))),
        Connection::new(Box::new(ChannelSink(b_tx)), Box::new(ChannelSource(a_rx))),
    )
}

pub struct ChannelAcceptor {
    incoming: Receiver<Connection>,
}

#[derive(Clone)]
pub struct ChannelConnector {
    outgoing: Sender<Connection>,
}

/// In-process transport: clients call [`ChannelConnector::connect`], the server
/// accepts from the [`ChannelAcceptor`]. Frames are still fully encoded.
pub fn channel_transport() -> (ChannelAcceptor, ChannelConnector) {
    let (tx, rx) = mpsc::channel();
    (ChannelAcceptor { incoming: rx }, ChannelConnector { outgoing: tx })
}

impl ChannelConnector {
    pub fn connect(&self) -> Result<Connection, CommError> {
        let (server_end, client_end) = channel_pair();
        self.outgoing.send(server_end).map_err(|_| CommError::Disconnected)?;
        Ok(client_end)
    }
}

impl Acceptor for ChannelAcceptor {
    fn accept(&mut self) -> Result<Connection, CommError> {
        self.incoming.recv().map_err(|_| CommError::Disconnected)
    }
}

struct TcpSink(TcpStream);

impl FrameSink for TcpSink {
    fn send_frame(&mut self, frame: Vec<u8>) -> Result<(), CommError> {
        self.0.write_all(&frame)?;
        self.0.flush()?;
        Ok(())
    }
}

struct TcpSource(TcpStream);

fn read_exact_mapped(stream: &mut TcpStream, buf: &mut [u8]) -> Result<(), CommError> {
    stream.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::WouldBlock | ErrorKind::TimedOut => CommError::Timeout,
        ErrorKind::UnexpectedEof | ErrorKind::ConnectionReset | ErrorKind::ConnectionAborted => CommError::Disconnected,
        _ => CommError::Io(e),
    })
}

impl FrameSource for TcpSource {
    fn recv_frame(&mut self, timeout: Option<Duration>) -> Result<Vec<u8>, CommError> {
        self.0.set_read_timeout(timeout)?;
        let mut frame = vec![0u8; HEADER_BYTES];
        read_exact_mapped(&mut self.0, &mut frame)?;
        let header = decode_header(&frame)?;
        let rest = header.payload_len as usize + TRAILER_BYTES;
        frame.resize(HEADER_BYTES + rest, 0);
        read_exact_mapped(&mut self.0, &mut frame[HEADER_BYTES..])?;
        Ok(frame)
    }
}

fn tcp_connection(stream: TcpStream) -> Result<Connection, CommError> {
    stream.set_nodelay(true)?;
    let reader = stream.try_clone()?;
    Ok(Connection::new(Box::new(TcpSink(stream)), Box::new(TcpSource(reader))))
}

pub struct TcpAcceptor {
    listener: TcpListener,
}

impl TcpAcceptor {
    pub fn bind(addr: impl ToSocketAddrs) -> Result<Self, CommError> {
        Ok(Self {
            listener: TcpListener::bind(addr)?,
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, CommError> {
        Ok(self.listener.local_addr()?)
    }
}

impl Acceptor for TcpAcceptor {
    fn accept(&mut self) -> Result<Connection, CommError> {
        let (stream, peer) = self.listener.accept()?;
        log::debug!("accepted connection from {peer}");
        tcp_connection(stream)
    }
}

/// Connects to a server, retrying until `patience` elapses so clients may
/// start before the server is listening.
pub fn tcp_connect(addr: impl ToSocketAddrs, patience: Duration) -> Result<Connection, CommError> {
    let addrs: Vec<SocketAddr> = addr.to_socket_addrs()?.collect();
    let deadline = std::time::Instant::now() + patience;
    loop {
        match TcpStream::connect(&addrs[..]) {
            Ok(s) => return tcp_connection(s),
            Err(e) if std::time::Instant::now() < deadline && e.kind() == ErrorKind::ConnectionRefused => {
                std::thread::sleep(Duration::from_millis(100));
            }
            Err(e) => return Err(e.into()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_pair_carries_messages() {
        let (mut a, mut b) = channel_pair();
        a.send(&RoundMessage::Shutdown { reason: "x".into() }).unwrap();
        assert_eq!(b.recv(None).unwrap(), RoundMessage::Shutdown { reason: "x".into() });
        assert!(matches!(a.recv(Some(Duration::from_millis(10))), Err(CommError::Timeout)));
        drop(b);
        assert!(matches!(a.recv(None), Err(CommError::Disconnected)));
    }

    #[test]
    fn tcp_loopback_carries_messages() {
        let mut acceptor = TcpAcceptor::bind("127.0.0.1:0").unwrap();
        let addr = acceptor.local_addr().unwrap();
        let client = std::thread::spawn(move || {
            let mut c = tcp_connect(addr, Duration::from_secs(5)).unwrap();
            c.send(&RoundMessage::GlobalModelEval {
                round: 1,
                loss: 0.5,
                acc: 0.75,
            })
            .unwrap();
            c.recv(None).unwrap()
        });
        let mut server = acceptor.accept().unwrap();
        assert_eq!(
            server.recv(None).unwrap(),
            RoundMessage::GlobalModelEval {
                round: 1,
                loss: 0.5,
                acc: 0.75
            }
        );
        server.send(&RoundMessage::Shutdown { reason: "done".into() }).unwrap();
        assert_eq!(client.join().unwrap(), RoundMessage::Shutdown { reason: "done".into() });
    }
}

"""HTTP front end for the enclave.

The host is untrusted by design: it moves opaque request bytes into the
enclave and sealed blobs onto disk, and throttles abusive sources. It never
holds a session key, so there is nothing sensitive for it to log.
"""

from __future__ import annotations

import logging
import threading
from contextlib import asynccontextmanager

from fastapi import FastAPI, Request
from fastapi.concurrency import run_in_threadpool
from fastapi.responses import JSONResponse, Response

from ..enclave import Enclave, InjectedCrash, PasswordHasher, State
from ..errors import ChannelError, ClockTampered, DecodeError, EnclaveFailed, RefusedNotServing, RollbackDetected
from ..platform import Platform
from .blobstore import BlobStore
from .schemas import ClockAdvance, ErrorBody, FaultRequest, HostConfig, MetricsResponse, StatusResponse
from .throttle import TokenBucketThrottle

log = logging.getLogger(__name__)

OCTETS = "application/octet-stream"
EXIT_OK, EXIT_ROLLBACK, EXIT_CLOCK, EXIT_CONFIG = 0, 2, 3, 4


class HostConfigError(Exception):
    pass


class Host:
    """Drives one enclave instance: boot, periodic checkpoints, shutdown."""

    def __init__(self, config: HostConfig):
        self.config = config
        self.platform = Platform(config.data_dir, manual_clock=config.harness_mode)
        self.store = BlobStore(config.data_dir)
        self.enclave = Enclave(
            self.platform,
            hasher=PasswordHasher(log2_n=config.kdf_log2_n),
            blob_sink=self.store.write,
        )
        self.throttle = TokenBucketThrottle(config.host_rate_limit)
        self.throttled = 0
        self._faults: dict[str, int] = {}
        self._fault_lock = threading.Lock()
        self._stop = threading.Event()
        self._checkpointer: threading.Thread | None = None
        if config.harness_mode:
            self.enclave.fault_hook = self._fault

    def start(self) -> None:
        blob = self.store.load()
        offset = self.config.time_offset
        if blob is not None and offset is not None:
            raise HostConfigError("--time-offset is only accepted on first boot")
        try:
            self.enclave.initialize(blob, offset)
        except EnclaveFailed as err:
            log.error("enclave refused to start: %s (%s)", err.code, err)
            return
        # a blob matching the post-boot counter, so a crash is recoverable
        self.enclave.checkpoint()
        self._checkpointer = threading.Thread(target=self._checkpoint_loop, name="cks-checkpoint", daemon=True)
        self._checkpointer.start()

    def _checkpoint_loop(self) -> None:
        while not self._stop.wait(self.config.checkpoint_interval):
            if self.enclave.state is not State.SERVING or not self.enclave.dirty:
                continue
            try:
                self.enclave.checkpoint()
            except (EnclaveFailed, RefusedNotServing):
                return
            except Exception:
                log.exception("checkpoint failed")

    def stop(self) -> None:
        self._stop.set()
        if self._checkpointer is not None:
            self._checkpointer.join(timeout=5)
        if self.enclave.state is State.SERVING:
            self.enclave.shutdown()
        self.platform.close()

    @property
    def exit_code(self) -> int:
        failure = self.enclave.failure
        if isinstance(failure, RollbackDetected):
            return EXIT_ROLLBACK
        if isinstance(failure, ClockTampered):
            return EXIT_CLOCK
        return EXIT_OK

    def _fault(self, point: str) -> None:
        with self._fault_lock:
            left = self._faults.get(point, 0)
            if not left:
                return
            self._faults[point] = left - 1
        raise InjectedCrash(f"injected crash at {point}")

    def arm_fault(self, point: str, count: int) -> None:
        with self._fault_lock:
            self._faults[point] = count

    def metrics(self) -> MetricsResponse:
        stats = self.enclave.stats()
        return MetricsResponse(
            **stats,
            blob_writes=self.store.writes,
            throttled=self.throttled,
            trusted_ticks=self.platform.trusted_time().ticks,
        )


def _error(status: int, code: str, message: str = "") -> JSONResponse:
    return JSONResponse(ErrorBody(code=code, message=message).model_dump(), status_code=status)


class ThrottleGate:
    """Per-source throttling, then refusal while the enclave is FAILED.

    Plain ASGI rather than ``@app.middleware``: it sits on every request and
    the wrapper-based form costs a task and a stream per call.
    """

    def __init__(self, app):
        self.app = app

    async def __call__(self, scope, receive, send):
        if scope["type"] == "http" and not scope["path"].startswith("/v1/harness/"):
            host: Host = scope["app"].state.host
            client = scope.get("client")
            if not host.throttle.allow(client[0] if client else "unknown"):
                host.throttled += 1
                return await _error(429, "throttled", "host rate limit exceeded")(scope, receive, send)
            if host.enclave.state is State.FAILED:
                failure = host.enclave.failure
                return await _error(503, failure.code, str(failure))(scope, receive, send)
        await self.app(scope, receive, send)


def create_app(config: HostConfig) -> FastAPI:
    @asynccontextmanager
    async def lifespan(app: FastAPI):
        host = Host(config)
        app.state.host = host
        host.start()
        try:
            yield
        finally:
            host.stop()

    app = FastAPI(title="Cloud Key Store host", lifespan=lifespan)

    app.add_middleware(ThrottleGate)

    @app.get("/v1/quote")
    def quote(request: Request):
        host: Host = request.app.state.host
        try:
            return Response(host.enclave.quote_body(), media_type=OCTETS)
        except EnclaveFailed as err:
            return _error(503, err.code, str(err))
        except RefusedNotServing as err:
            return _error(503, err.code, str(err))

    @app.post("/v1/process")
    async def process(request: Request):
        host: Host = request.app.state.host
        body = await request.body()
        try:
            reply = await run_in_threadpool(host.enclave.process, body)
        except EnclaveFailed as err:
            return _error(503, err.code, str(err))
        except RefusedNotServing as err:
            return _error(503, err.code, str(err))
        except (ChannelError, DecodeError) as err:
            return _error(400, err.code, str(err))
        except InjectedCrash as err:
            return _error(500, err.code, "request aborted")
        return Response(reply, media_type=OCTETS)

    @app.get("/v1/status", response_model=StatusResponse)
    def status(request: Request):
        host: Host = request.app.state.host
        failure = host.enclave.failure
        return StatusResponse(
            state=host.enclave.state.value,
            measurement=host.enclave.measurement.hex(),
            failure=failure.code if failure else None,
            harness_mode=config.harness_mode,
        )

    if config.harness_mode:
        _add_harness_routes(app)
    return app


def _add_harness_routes(app: FastAPI) -> None:
    @app.post("/v1/harness/clock/advance")
    def advance_clock(body: ClockAdvance, request: Request):
        request.app.state.host.platform.advance_clock(body.seconds)
        return {"ticks": request.app.state.host.platform.trusted_time().ticks}

    @app.post("/v1/harness/clock/reset")
    def reset_clock(request: Request):
        request.app.state.host.platform.reset_clock()
        return {"ticks": request.app.state.host.platform.trusted_time().ticks}

    @app.post("/v1/harness/fault")
    def arm_fault(body: FaultRequest, request: Request):
        request.app.state.host.arm_fault(body.point, body.count)
        return {"armed": body.count}

    @app.post("/v1/harness/checkpoint")
    def checkpoint(request: Request):
        host: Host = request.app.state.host
        try:
            host.enclave.checkpoint()
        except (EnclaveFailed, RefusedNotServing) as err:
            return _error(503, err.code, str(err))
        return {"version": host.enclave.stats()["version"]}

    @app.get("/v1/harness/metrics", response_model=MetricsResponse)
    def metrics(request: Request):
        return request.app.state.host.metrics()

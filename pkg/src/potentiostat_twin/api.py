"""HTTP/JSON front end over the same DeviceService the UDP server uses.

Every route maps onto one wire command, so both transports share one
validation path and one error vocabulary (ERR codes become HTTP statuses).
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, StrictBool, StrictInt, constr

from . import wire
from .device import info
from .server import DeviceService

_STATUS = {wire.ErrorCode.PARSE: 400, wire.ErrorCode.RANGE: 422,
           wire.ErrorCode.STATE: 409, wire.ErrorCode.UNSUPPORTED: 501}


class VoltageIn(BaseModel):
    mv: StrictInt


class SwitchIn(BaseModel):
    on: StrictBool


class RunIn(BaseModel):
    name: constr(pattern=r"^[A-Za-z0-9_.-]{1,64}$")


class Reply(BaseModel):
    ok: bool = True
    payload: str = ""


class ChannelValue(BaseModel):
    channel: int
    value: int
    unit: str


class ErrorOut(BaseModel):
    code: int
    text: str


def create_app(service: DeviceService) -> FastAPI:
    app = FastAPI(title="potentiostat twin", version="0.1.0")

    def call(cmd) -> str:
        reply = service.submit(cmd)
        if isinstance(reply, wire.Err):
            raise HTTPException(status_code=_STATUS.get(reply.code, 500),
                                detail=ErrorOut(code=int(reply.code), text=reply.text).model_dump())
        return reply.payload

    @app.get("/ping", response_model=Reply)
    def ping():
        return Reply(payload=call(wire.Ping()))

    @app.get("/info")
    def get_info():
        call(wire.Ping())
        return info(service.device)

    @app.put("/channels/{ch}/voltage", response_model=ChannelValue)
    def set_voltage(ch: int, body: VoltageIn):
        call(wire.Set(ch, body.mv))
        return ChannelValue(channel=ch, value=int(call(wire.GetV(ch))), unit="mV")

    @app.get("/channels/{ch}/voltage", response_model=ChannelValue)
    def get_voltage(ch: int):
        return ChannelValue(channel=ch, value=int(call(wire.GetV(ch))), unit="mV")

    @app.put("/channels/{ch}/switch", response_model=Reply)
    def set_switch(ch: int, body: SwitchIn):
        return Reply(payload=call(wire.Sw(ch, int(body.on))))

    @app.get("/channels/{ch}/current", response_model=ChannelValue)
    def get_current(ch: int):
        return ChannelValue(channel=ch, value=int(call(wire.GetI(ch))), unit="pA")

    @app.post("/calibrate")
    def calibrate():
        return {"baselines_pA": [int(x) for x in call(wire.Cal()).split()]}

    @app.post("/run", response_model=Reply)
    def run(body: RunIn):
        return Reply(payload=call(wire.Run(body.name)))

    @app.post("/stop", response_model=Reply)
    def stop():
        return Reply(payload=call(wire.Stop()))

    return app

import json
import logging
import os
import time
from typing import Optional

from dotenv import load_dotenv
from fastapi import FastAPI, HTTPException
from fastapi.responses import Response
from fastapi.testclient import TestClient

# Load environment variables from .env (D2L_RUN_DIR, D2L_RUN_NAME, ...)
load_dotenv()

from doc2lora.adapters import LoraAdapter, PrefixKV, serialize_adapter
from doc2lora.errors import Doc2LoraError
from doc2lora.hypernet import internalize
from doc2lora.logs import configure_logging
from doc2lora.models import HypernetConfig, InternalizeRequest, InternalizeResponse, LMConfig, QueryRequest, QueryResponse
from doc2lora.session import Runtime, get_session, init_session, serving_dir
from doc2lora.target_lm import generate
from doc2lora.text import decode, encode, normalize, student_prompt

logger = logging.getLogger("doc2lora.app")


def create_app(runtime: Optional[Runtime] = None) -> FastAPI:
    """The service; without an explicit runtime the trained run under D2L_RUN_DIR is loaded on first use."""
    app = FastAPI(title="Doc2LoRA internalization service", version="1.0")
    state = {"runtime": runtime}

    def current() -> Runtime:
        if state["runtime"] is None:
            try:
                state["runtime"] = Runtime.from_run_dir(serving_dir())
            except Doc2LoraError as e:
                raise HTTPException(status_code=503, detail=str(e))
        return state["runtime"]

    @app.get("/health")
    def health_check():
        """Health check endpoint"""
        rt = state["runtime"]
        return {"status": "healthy", "model": rt.describe() if rt is not None else None}

    @app.post("/api/internalize", response_model=InternalizeResponse)
    def internalize_document(req: InternalizeRequest):
        rt = current()
        try:
            text = normalize(req.document)
            tokens = encode(text)
            t0 = time.perf_counter()
            made = internalize(rt.hypernet, rt.lm, tokens, req.mode)
            latency = (time.perf_counter() - t0) * 1000.0
        except Doc2LoraError as e:
            raise HTTPException(status_code=422, detail=str(e))
        session_id = init_session(made, len(tokens), req.session_id)
        if isinstance(made, PrefixKV):
            n_chunks, total_rank = made.n_chunks, made.n_prefix
        else:
            n_chunks, total_rank = made.n_chunks, made.total_rank
        return InternalizeResponse(
            session_id=session_id,
            n_chunks=n_chunks,
            total_rank=total_rank,
            context_tokens=len(tokens),
            latency_ms=latency,
            replaced_chars=sum(a != b for a, b in zip(req.document.lower(), text)),
        )

    @app.post("/api/query", response_model=QueryResponse)
    def query(req: QueryRequest):
        rt = current()
        session = get_session(req.session_id)
        if session is None:
            raise HTTPException(status_code=404, detail=f"unknown session {req.session_id}")
        try:
            prompt = student_prompt(encode(normalize(req.query)))
            adapter = session.adapter if isinstance(session.adapter, LoraAdapter) else None
            prefix = session.adapter if isinstance(session.adapter, PrefixKV) else None
            answer = decode(generate(rt.lm, prompt, req.max_new, adapter=adapter, prefix=prefix))
        except Doc2LoraError as e:
            raise HTTPException(status_code=422, detail=str(e))
        session.history.append({"query": req.query, "answer": answer})
        return QueryResponse(session_id=req.session_id, answer=answer, prompt_tokens=len(prompt))

    @app.get("/api/adapter/{session_id}")
    def download_adapter(session_id: str):
        session = get_session(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id}")
        if not isinstance(session.adapter, LoraAdapter):
            raise HTTPException(status_code=422, detail="prefix-KV sessions have no .d2la form")
        return Response(content=serialize_adapter(session.adapter), media_type="application/octet-stream")

    return app


app = create_app()


# -------------------------
# Demo runner
# -------------------------
def run_demo():
    """Internalize a short document and query it, printing the full JSON of each call."""
    runtime = None
    if not (serving_dir() / "hypernet.d2hn").exists():
        print(f"No trained run at {serving_dir()}; using untrained models, answers will be noise.")
        runtime = Runtime.random(LMConfig(), HypernetConfig(max_chunk_tokens=256))
    tc = TestClient(create_app(runtime))

    document = "The special magic number is 4821. The old farmer carried a wooden chair near the market."
    resp = tc.post("/api/internalize", json={"document": document})
    print(json.dumps(resp.json(), indent=2))
    session_id = resp.json()["session_id"]
    for q in ("What is the special magic number? Reply with only the number.", "who carried the chair?"):
        resp = tc.post("/api/query", json={"session_id": session_id, "query": q, "max_new": 8})
        print(json.dumps(resp.json(), indent=2))


if __name__ == "__main__":
    configure_logging(os.environ.get("D2L_LOG_LEVEL", "INFO"))
    run_demo()

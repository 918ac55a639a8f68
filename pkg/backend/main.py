"""
线性表示假设下的测试时训练数值实验室 - HTTP 接口
"""

import logging
import math
from typing import Any, Dict, List

import numpy as np
import uvicorn
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field

from services.concept_model import make_nonlearnable_instance
from services.errors import ConfigError, DataFormatError
from services.estimators import evaluate_interference, ttt_cell_errors
from services.harness import VERSION, ExperimentConfig, ExperimentService
from services.numeric_core import bootstrap_ci, make_rng

logger = logging.getLogger(__name__)

# 创建FastAPI应用
app = FastAPI(
    title="测试时训练数值实验室",
    description="稀疏概念世界、叠加特征、全局与局部估计器、稀疏自编码器与规模实验",
    version=VERSION,
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

experiment_service = ExperimentService()


class InterferenceRequest(BaseModel):
    """干扰误差快速检查"""
    d1: int = Field(128, ge=1, le=4096)
    d2: int = Field(32, ge=1)
    trials: int = Field(50, ge=1, le=1000)
    seed: int = Field(0, ge=0)


class InterferenceResponse(BaseModel):
    d1: int
    d2: int
    trials: int
    expected: float
    global_error: float
    ci_low: float
    ci_high: float
    max_ttt_error: float


class ExperimentResponse(BaseModel):
    experiment: str
    rows: List[Dict[str, Any]]
    provenance: Dict[str, Any]
    failures: List[Dict[str, Any]]


def _http_error(e: Exception, action: str) -> HTTPException:
    if isinstance(e, ConfigError):
        return HTTPException(status_code=400, detail=f"{action}参数错误: {e}")
    if isinstance(e, DataFormatError):
        return HTTPException(status_code=422, detail=f"{action}数据错误: {e}")
    logger.error("%s失败: %s", action, e)
    return HTTPException(status_code=500, detail=f"{action}失败: {e}")


def _json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, np.generic):
        return _json_safe(value.item())
    return value


@app.get("/")
async def root():
    """根路径"""
    return {
        "message": "测试时训练数值实验室API",
        "version": VERSION,
        "status": "running",
    }


@app.get("/health")
async def health_check():
    """健康检查"""
    return {"status": "healthy"}


@app.get("/experiments/kinds")
async def experiment_kinds():
    """可运行的实验类型"""
    return {"kinds": experiment_service.kinds()}


@app.post("/experiments/run", response_model=ExperimentResponse)
def run_experiment(config: ExperimentConfig):
    """
    运行一个实验网格并返回结果行；请求内不写文件
    """
    try:
        result = experiment_service.run(config, write=False)
    except Exception as e:
        raise _http_error(e, "实验")
    rows = [{k: _json_safe(v) for k, v in row.items()}
            for row in result.table.to_dict(orient="records")]
    return ExperimentResponse(experiment=result.experiment, rows=rows,
                              provenance=result.provenance, failures=result.failures)


@app.post("/interference", response_model=InterferenceResponse)
def interference(request: InterferenceRequest):
    """
    不可全局学习实例上的干扰误差，对照闭式值 1 − d₂/d₁
    """
    try:
        errors = np.empty(request.trials)
        max_ttt = 0.0
        for t in range(request.trials):
            instance = make_nonlearnable_instance(request.d1, request.d2,
                                                  make_rng(request.seed, (t,)))
            errors[t] = evaluate_interference(instance).error
            max_ttt = max(max_ttt, float(np.max(ttt_cell_errors(instance))))
        low, high = bootstrap_ci(errors, rng=make_rng(request.seed, (request.trials,)))
    except Exception as e:
        raise _http_error(e, "干扰误差计算")
    return InterferenceResponse(d1=request.d1, d2=request.d2, trials=request.trials,
                                expected=1.0 - request.d2 / request.d1,
                                global_error=float(errors.mean()), ci_low=low, ci_high=high,
                                max_ttt_error=max_ttt)


if __name__ == "__main__":
    uvicorn.run(
        "main:app",
        host="0.0.0.0",
        port=8000,
        reload=True,
        log_level="info"
    )

"""Service configuration files (role instance counts plus name/value settings)
and the JSON resource-pool file."""
from __future__ import annotations

import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional
from xml.sax.saxutils import quoteattr

from ..core import MalformedUri, NodeUri, parse_node_uri
from ..provisioning import PoolConfig
from ..provisioning import ValidationError as PoolValidationError

KNOWN_SETTINGS = (
    "DiagnosticsConnectionString",
    "DataConnectionString",
    "SharedKey",
    "IndexServerUri",
    "ResourcePool",
    "SubscriptionID",
    "HostedServiceName",
    "CertificateThumbprint",
    "DeploymentLevel",
    "AdoConnectionString",
)
# accepted so real files load, but nothing reads them
IGNORED_SETTINGS = ("AdoConnectionString",)
DEPLOYMENT_LEVELS = ("Master", "Worker")
NAMESPACE = "http://schemas.microsoft.com/ServiceHosting/2008/10/ServiceConfig"


class ParseError(ValueError):
    def __init__(self, message: str, line: int = 0, column: int = 0):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class ValidationError(ValueError):
    def __init__(self, key: str, message: str = ""):
        super().__init__(f"{key}: {message}" if message else key)
        self.key = key


@dataclass(frozen=True)
class Certificate:
    name: str
    thumbprint: str
    algorithm: str = "sha1"


@dataclass
class RoleConfig:
    name: str
    instances: int
    settings: dict[str, str] = field(default_factory=dict)
    certificates: list[Certificate] = field(default_factory=list)

    @property
    def is_worker(self) -> bool:
        # the worker role is named for its job; its DeploymentLevel may still say Master
        return self.name.endswith("Worker")


@dataclass
class ServiceConfig:
    service_name: str
    roles: list[RoleConfig] = field(default_factory=list)

    def role(self, name: str) -> RoleConfig:
        for r in self.roles:
            if r.name == name:
                return r
        raise KeyError(name)

    @property
    def worker_role(self) -> Optional[RoleConfig]:
        return next((r for r in self.roles if r.is_worker), None)

    @property
    def master_role(self) -> Optional[RoleConfig]:
        return next((r for r in self.roles if not r.is_worker), None)

    @property
    def worker_count(self) -> int:
        role = self.worker_role
        return role.instances if role else 0

    def setting(self, key: str) -> Optional[str]:
        for r in self.roles:
            if key in r.settings:
                return r.settings[key]
        return None

    @property
    def shared_key(self) -> str:
        return self.setting("SharedKey")

    @property
    def index_server_uri(self) -> NodeUri:
        return parse_node_uri(self.setting("IndexServerUri"))

    @property
    def ignored(self) -> list[str]:
        """Settings that were present and deliberately not acted on."""
        return sorted({k for r in self.roles for k in r.settings if k in IGNORED_SETTINGS})

    def validate(self, cloud_mode: bool = False) -> "ServiceConfig":
        if not self.roles:
            raise ValidationError("Role", "at least one role is required")
        for r in self.roles:
            if r.instances < 0:
                raise ValidationError("Instances", f"negative count in role {r.name}")
            for key in r.settings:
                if key not in KNOWN_SETTINGS:
                    raise ValidationError(key, "unknown setting")
            if not r.settings.get("SharedKey"):
                raise ValidationError("SharedKey", f"missing in role {r.name}")
            level = r.settings.get("DeploymentLevel")
            if level is not None and level not in DEPLOYMENT_LEVELS:
                raise ValidationError("DeploymentLevel", f"{level!r} is not one of {DEPLOYMENT_LEVELS}")
            uri = r.settings.get("IndexServerUri")
            if uri is not None:
                try:
                    parse_node_uri(uri)
                except MalformedUri as exc:
                    raise ValidationError("IndexServerUri", str(exc)) from None
        if cloud_mode and self.worker_count < 1:
            raise ValidationError("Instances", "cloud deployments need at least one worker")
        return self


def _local(tag: str) -> str:
    return tag.rsplit("}", 1)[-1]


def _require(el: ET.Element, attr: str) -> str:
    value = el.get(attr)
    if value is None:
        raise ValidationError(attr, f"missing on <{_local(el.tag)}>")
    return value


def parse_config(text: str) -> ServiceConfig:
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        line, col = exc.position
        raise ParseError(str(exc), line, col) from None
    if _local(root.tag) != "ServiceConfiguration":
        raise ValidationError("ServiceConfiguration", f"unexpected root <{_local(root.tag)}>")
    cfg = ServiceConfig(root.get("serviceName", ""))
    for role_el in root:
        if _local(role_el.tag) != "Role":
            raise ValidationError(_local(role_el.tag), "unexpected element")
        role = RoleConfig(_require(role_el, "name"), 0)
        for child in role_el:
            tag = _local(child.tag)
            if tag == "Instances":
                try:
                    role.instances = int(_require(child, "count"))
                except ValueError:
                    raise ValidationError("Instances", "count must be an integer") from None
            elif tag == "ConfigurationSettings":
                for s in child:
                    if _local(s.tag) != "Setting":
                        raise ValidationError(_local(s.tag), "unexpected element")
                    name = _require(s, "name")
                    if name not in KNOWN_SETTINGS:
                        raise ValidationError(name, "unknown setting")
                    role.settings[name] = _require(s, "value")
            elif tag == "Certificates":
                for c in child:
                    role.certificates.append(Certificate(_require(c, "name"), _require(c, "thumbprint"),
                                                         c.get("thumbprintAlgorithm", "sha1")))
            else:
                raise ValidationError(tag, "unexpected element")
        cfg.roles.append(role)
    return cfg.validate()


def load_config(path) -> ServiceConfig:
    return parse_config(Path(path).read_text())


def emit(cfg: ServiceConfig) -> str:
    out = ['<?xml version="1.0"?>',
           f'<ServiceConfiguration serviceName={quoteattr(cfg.service_name)} xmlns="{NAMESPACE}" >']
    for r in cfg.roles:
        out.append(f"  <Role name={quoteattr(r.name)}>")
        out.append(f'    <Instances count="{r.instances}" />')
        out.append("    <ConfigurationSettings>")
        for k, v in r.settings.items():
            out.append(f"      <Setting name={quoteattr(k)} value={quoteattr(v)} />")
        out.append("    </ConfigurationSettings>")
        if r.certificates:
            out.append("    <Certificates>")
            for c in r.certificates:
                out.append(f"      <Certificate name={quoteattr(c.name)} thumbprint={quoteattr(c.thumbprint)} "
                           f"thumbprintAlgorithm={quoteattr(c.algorithm)} />")
            out.append("    </Certificates>")
        out.append("  </Role>")
    out.append("</ServiceConfiguration>")
    return "\n".join(out) + "\n"


# ─── pool configuration ──────────────────────────────────────────────────────

def load_pool_config(path) -> PoolConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.lineno, exc.colno) from None
    try:
        return PoolConfig.from_dict(data)
    except PoolValidationError as exc:
        raise ValidationError(exc.key, str(exc)) from None


DEFAULT_SERVICE_CONFIG = """<?xml version="1.0"?>
<ServiceConfiguration serviceName="AnekaOnWindowsAzure" xmlns="http://schemas.microsoft.com/ServiceHosting/2008/10/ServiceConfig" >
  <Role name="AnekaMaster">
    <Instances count="1" />
    <ConfigurationSettings>
      <Setting name="DiagnosticsConnectionString" value="DefaultEndpointsProtocol=https;AccountName=anekacloud;AccountKey=eGhauL1" />
      <Setting name="DataConnectionString" value="DefaultEndpointsProtocol=https;AccountName=anekacloud;AccountKey=eGhauL194C9QA" />
      <Setting name="SharedKey" value="Qq6dthHKWph0QkS5X7rJL0qLeR14IQfgMexGapTBouijEZzy2XGM3ytK/uldFHQB" />
      <Setting name="IndexServerUri" value="tcp://localhost:3333/Aneka" />
      <Setting name="ResourcePool" value="MyWindowsAzurePool" />
      <Setting name="SubscriptionID" value="a22fc8fe-5955-421f-a370-75e3f1246323" />
      <Setting name="HostedServiceName" value="anekacloud" />
      <Setting name="CertificateThumbprint" value="81841B188C32BE42B5256CAED1CE905099785CA9" />
      <Setting name="DeploymentLevel" value="Master" />
      <Setting name="AdoConnectionString" value="Server=tcp:wlfypjjbpf.database.windows.net;Database=aneka;User ID=aneka@wlfypjjt" />
    </ConfigurationSettings>
    <Certificates>
      <Certificate name="SelfManagement" thumbprint="81841B188C32BE42B5256CAED1CE905099785CA9" thumbprintAlgorithm="sha1" />
    </Certificates>
  </Role>
  <Role name="AnekaWorker">
    <Instances count="5" />
    <ConfigurationSettings>
      <Setting name="DiagnosticsConnectionString" value="DefaultEndpointsProtocol=https;AccountName=anekacloud;AccountKey=eGhauL1" />
      <Setting name="DataConnectionString" value="DefaultEndpointsProtocol=https;AccountName=anekacloud;AccountKey=eGhauL194C9QA" />
      <Setting name="SharedKey" value="Qq6dthHKWph0QkS5X7rJL0qLeR14IQfgMexGapTBouijEZzy2XGM3ytK/uldFHQB" />
      <Setting name="IndexServerUri" value="tcp://localhost:3333/Aneka" />
      <Setting name="ResourcePool" value="MyWindowsAzurePool" />
      <Setting name="SubscriptionID" value="a22fc8fe-5955-421f-a370-75e3f1246323" />
      <Setting name="HostedServiceName" value="anekacloud" />
      <Setting name="CertificateThumbprint" value="81841B188C32BE42B5256CAED1CE905099785CA9" />
      <Setting name="DeploymentLevel" value="Master" />
      <Setting name="AdoConnectionString" value="" />
    </ConfigurationSettings>
    <Certificates>
      <Certificate name="SelfManagement" thumbprint="81841B188C32BE42B5256CAED1CE905099785CA9" thumbprintAlgorithm="sha1" />
    </Certificates>
  </Role>
</ServiceConfiguration>
"""


def default_service_config() -> ServiceConfig:
    return parse_config(DEFAULT_SERVICE_CONFIG)

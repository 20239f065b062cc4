"""Squid configuration fragment for gateway-level deployment."""

from __future__ import annotations

SQUID_TEMPLATE = """\
# --- dlpgate ICAP integration (generated by `dlpctl gen-squid-conf`) ---
# Every request and response is sent through the DLP service. bypass=off makes
# Squid refuse traffic when the service is unreachable (fail closed).
icap_enable on
icap_send_client_ip on
icap_send_client_username on
icap_client_username_header X-Authenticated-User
icap_client_username_encode on
icap_preview_enable on
icap_preview_size {preview}
icap_persistent_connections on
icap_service_failure_limit -1

icap_service dlp_req reqmod_precache icap://{address}/reqmod bypass={bypass}
icap_service dlp_resp respmod_precache icap://{address}/respmod bypass={bypass}
adaptation_access dlp_req allow all
adaptation_access dlp_resp allow all

http_port {http_port}

# --- TLS interception (SSL bump) --------------------------------------------
# HTTPS uploads are only inspectable once Squid terminates TLS with an
# enterprise CA that client machines trust. Gateway-level rollout:
#
#   1. Create the CA on the gateway:
#        openssl req -new -newkey rsa:4096 -sha256 -days 730 -nodes -x509 \\
#          -subj "/CN=Enterprise DLP Gateway CA" \\
#          -keyout /etc/squid/ssl/dlp-ca.key -out /etc/squid/ssl/dlp-ca.pem
#        cat /etc/squid/ssl/dlp-ca.key /etc/squid/ssl/dlp-ca.pem > /etc/squid/ssl/dlp-ca-bundle.pem
#        chmod 600 /etc/squid/ssl/dlp-ca.key /etc/squid/ssl/dlp-ca-bundle.pem
#   2. Initialise the dynamic certificate cache:
#        /usr/lib/squid/security_file_certgen -c -s /var/lib/squid/ssl_db -M 16MB
#   3. Distribute dlp-ca.pem to every domain machine from the domain controller
#      (Group Policy: Computer Configuration > Windows Settings > Security
#      Settings > Public Key Policies > Trusted Root Certification Authorities),
#      or push it with a startup script, instead of installing it by hand.
#   4. Uncomment:
# https_port {https_port} intercept ssl-bump tls-cert=/etc/squid/ssl/dlp-ca-bundle.pem generate-host-certificates=on dynamic_cert_mem_cache_size=16MB
# sslcrtd_program /usr/lib/squid/security_file_certgen -s /var/lib/squid/ssl_db -M 16MB
# acl step1 at_step SslBump1
# ssl_bump peek step1
# ssl_bump bump all
"""


def gen_squid_conf(
    address: str = "127.0.0.1:1344",
    http_port: int = 3128,
    https_port: int = 3129,
    preview: int = 1024,
    bypass: bool = False,
) -> str:
    """Render the fragment; output depends only on the arguments."""
    return SQUID_TEMPLATE.format(
        address=address,
        http_port=http_port,
        https_port=https_port,
        preview=preview,
        bypass="on" if bypass else "off",
    )
